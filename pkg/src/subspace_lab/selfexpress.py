"""Self-expressive layer: the zero-diagonal coefficient matrix C and its losses."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .memory_bank import MemoryBank, live_view
from .tensor import Tensor


class SelfExpressiveCoefficients:
    """N x N coefficient matrix with diag(C) = 0 maintained by projection."""

    def __init__(self, n_samples: int, init: str = "zeros", scale: float = 1e-4, seed: int = 0):
        if init == "zeros":
            c = np.zeros((n_samples, n_samples))
        elif init == "noise":
            c = scale * np.random.default_rng(seed).standard_normal((n_samples, n_samples))
        else:
            raise ConfigError(f"unknown C init {init!r}")
        self.C = Tensor(c, requires_grad=True)
        project_zero_diag(self)

    @property
    def N(self) -> int:
        return self.C.shape[0]

    @classmethod
    def from_array(cls, array: np.ndarray) -> SelfExpressiveCoefficients:
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise DimensionError(f"C must be square, got {array.shape}")
        out = cls(array.shape[0])
        out.C.data[...] = array
        project_zero_diag(out)
        return out


def project_zero_diag(c: SelfExpressiveCoefficients) -> SelfExpressiveCoefficients:
    np.fill_diagonal(c.C.data, 0.0)
    return c


def reconstruct_batch(c: SelfExpressiveCoefficients, bank: MemoryBank, batch_indices, current_batch_latents: Tensor) -> Tensor:
    """Rows ``batch_indices`` of C Z, where Z is the bank with live rows for the batch.

    Gradients reach C (batch rows only) and the live latents; historical
    bank rows are constants.
    """
    idx = np.asarray(batch_indices, dtype=np.int64)
    if bank.N != c.N:
        raise DimensionError(f"bank has {bank.N} rows but C is {c.N}x{c.N}")
    if idx.size and (idx.min() < 0 or idx.max() >= c.N):
        raise IndexError(f"batch index out of range for N={c.N}")
    Z = live_view(bank, idx, current_batch_latents)
    return ops.matmul(ops.index_rows(c.C, idx), Z)


def se_loss(z_batch: Tensor, z_hat_batch: Tensor) -> Tensor:
    return ops.frobenius_sq(z_batch, z_hat_batch)


def reg_loss(c: SelfExpressiveCoefficients) -> Tensor:
    """Squared Frobenius norm of C."""
    return ops.sum(ops.mul(c.C, c.C))


def total_loss(recon_or_nce, se, reg, alpha: float, beta: float):
    if alpha < 0 or beta < 0:
        raise ConfigError(f"alpha and beta must be non-negative, got alpha={alpha}, beta={beta}")
    return recon_or_nce + alpha * se + beta * reg


def ridge_self_expression(Z: np.ndarray, lam: float = 0.01) -> np.ndarray:
    """Closed-form zero-diagonal ridge self-expression, solved sample by sample.

    Row i of C minimizes ||z_i - sum_{j != i} c_ij z_j||^2 + lam ||c_i||^2.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)
    G = Z @ Z.T
    C = np.zeros((n, n))
    for i in range(n):
        others = np.r_[0:i, i + 1 : n]
        A = G[np.ix_(others, others)] + lam * np.eye(n - 1)
        C[i, others] = np.linalg.solve(A, G[others, i])
    return C
