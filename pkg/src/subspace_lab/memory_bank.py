"""Per-sample latent store used by mini-batch self-expressive training.

Rows are written batch by batch; each row carries the (epoch, step) at which
it was produced, so staleness can be measured. The stored array never
participates in a backward pass: during a step the live batch latents are
substituted for their rows (see :func:`live_view`).
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import ops
from .data import Dataset
from .errors import ConfigError, DimensionError, StateError
from .tensor import Tensor, no_grad


class MemoryBank:
    def __init__(self, n_samples: int, dim: int):
        self.Z = np.zeros((n_samples, dim))
        self.epoch = np.full(n_samples, -1, dtype=np.int64)
        self.step = np.full(n_samples, -1, dtype=np.int64)

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    @property
    def h(self) -> int:
        return self.Z.shape[1]

    @property
    def initialized(self) -> bool:
        return bool(np.all(self.step >= 0))

    def write_batch(self, indices, latents, epoch: int, step: int) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        values = latents.data if isinstance(latents, Tensor) else np.asarray(latents, dtype=np.float64)
        if len(np.unique(idx)) != len(idx):
            raise IndexError("write_batch: duplicate indices within one batch")
        if idx.size and (idx.min() < 0 or idx.max() >= self.N):
            raise IndexError(f"write_batch: index out of range for bank of {self.N} rows")
        if values.shape != (len(idx), self.h):
            raise DimensionError(f"write_batch: latents {values.shape} do not match ({len(idx)}, {self.h})")
        if not np.all(np.isfinite(values)):
            raise ValueError("write_batch: non-finite latents")
        self.Z[idx] = values
        self.epoch[idx] = epoch
        self.step[idx] = step

    def read_full(self) -> np.ndarray:
        if not self.initialized:
            raise StateError("memory bank read before every row was written")
        return self.Z.copy()

    def staleness(self, step: int) -> Counter:
        """Histogram {age in steps: row count} relative to ``step``."""
        if not self.initialized:
            raise StateError("memory bank not initialized")
        return Counter(int(a) for a in step - self.step)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"Z": self.Z.copy(), "epoch": self.epoch.astype(np.float64), "step": self.step.astype(np.float64)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if state["Z"].shape != self.Z.shape:
            raise DimensionError(f"bank state {state['Z'].shape} != {self.Z.shape}")
        self.Z[...] = state["Z"]
        self.epoch[...] = state["epoch"].astype(np.int64)
        self.step[...] = state["step"].astype(np.int64)


def encode_in_batches(encoder, X: np.ndarray, batch_size: int) -> np.ndarray:
    with no_grad():
        return np.vstack([encoder(Tensor(X[i : i + batch_size])).data for i in range(0, len(X), batch_size)])


def init_from_encoder(autoencoder, dataset: Dataset, batch_size: int, n_samples: int | None = None) -> MemoryBank:
    """Fill every row with the encoder output (eval mode), in dataset order."""
    if n_samples is not None and n_samples != len(dataset):
        raise ConfigError(f"dataset has {len(dataset)} samples, configured N={n_samples}")
    was_training = autoencoder.training
    autoencoder.eval()
    try:
        Z = encode_in_batches(autoencoder.encode, dataset.X, batch_size)
    finally:
        autoencoder.train(was_training)
    bank = MemoryBank(*Z.shape)
    bank.write_batch(np.arange(len(Z)), Z, epoch=0, step=0)
    return bank


def live_view(bank: MemoryBank, indices, latents: Tensor) -> Tensor:
    """Full bank as a constant, with rows ``indices`` replaced by the gradient-carrying ``latents``."""
    if latents.ndim != 2 or latents.shape[1] != bank.h:
        raise DimensionError(f"latent width {latents.shape} does not match bank width {bank.h}")
    return ops.scatter_rows(bank.read_full(), indices, latents)


def consistency_lr(base_lr: float, k: int, reference_k: int = 1) -> float:
    """Scale the learning rate inversely with the number of batches per epoch."""
    if k < 1 or reference_k < 1:
        raise ConfigError(f"k and reference_k must be positive, got k={k}, reference_k={reference_k}")
    return base_lr * reference_k / k
