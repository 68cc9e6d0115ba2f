"""Decoder-free training path: augmentations and InfoNCE over memory-bank negatives."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .data import resize
from .errors import ConfigError, DegenerateError, NumericError
from .memory_bank import MemoryBank
from .selfexpress import SelfExpressiveCoefficients, reconstruct_batch, reg_loss, se_loss, total_loss
from .tensor import Tensor

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentationSpec:
    """Random view parameters.

    Image inputs ([c, h, w], values in [0, 1]) get crop-and-resize, horizontal
    flip, grayscale and brightness jitter. Flat feature vectors get only the
    multiplicative jitter (unclamped) and additive Gaussian noise.
    """

    crop_scale_range: tuple[float, float] = (1.0, 1.0)
    hflip_prob: float = 0.0
    grayscale_prob: float = 0.0
    brightness_jitter: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        for name in ("hflip_prob", "grayscale_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not 0 <= self.brightness_jitter < 1 or self.noise_sigma < 0:
            raise ConfigError("brightness_jitter must be in [0, 1) and noise_sigma >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> AugmentationSpec:
        d = dict(d)
        if "crop_scale_range" in d:
            d["crop_scale_range"] = tuple(d["crop_scale_range"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale_range"] = list(self.crop_scale_range)
        return d


def augment(image: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    # draw every random number up front so consumption does not depend on which transforms are enabled
    scale = rng.uniform(*spec.crop_scale_range)
    u_top, u_left, u_flip, u_gray = rng.random(4)
    factor = rng.uniform(1.0 - spec.brightness_jitter, 1.0 + spec.brightness_jitter)
    noise = rng.standard_normal(img.shape)

    if img.ndim == 1:
        out = img * factor
        if spec.noise_sigma > 0:
            out = out + spec.noise_sigma * noise
        return out
    if img.ndim != 3:
        raise ConfigError(f"augment expects [c, h, w] or a flat vector, got {img.shape}")

    c, h, w = img.shape
    ch, cw = int(round(h * np.sqrt(scale))), int(round(w * np.sqrt(scale)))
    if ch < 1 or cw < 1:
        raise ConfigError(f"crop of scale {scale:.4g} on {h}x{w} is smaller than one pixel")
    if (ch, cw) != (h, w):
        top = int(u_top * (h - ch + 1))
        left = int(u_left * (w - cw + 1))
        img = resize(img[:, top : top + ch, left : left + cw], h, w)
    if u_flip < spec.hflip_prob:
        img = img[:, :, ::-1]
    if u_gray < spec.grayscale_prob and c == 3:
        img = np.repeat(np.tensordot(LUMA, img, axes=1)[None], 3, axis=0)
    if spec.brightness_jitter > 0:
        img = np.clip(img * factor, 0.0, 1.0)
    return np.ascontiguousarray(img)


def augment_batch(X: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(x, spec, rng) for x in X])


@dataclass
class ContrastiveBatch:
    anchors_hat: Tensor
    positives: Tensor
    negatives: np.ndarray
    tau: float


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms < ops.ROW_NORM_FLOOR):
        raise DegenerateError("negative sample with zero norm")
    return a / norms


def make_contrastive_batch(z_hat: Tensor, z_pos: Tensor, negatives, tau: float) -> ContrastiveBatch:
    neg = negatives.data if isinstance(negatives, Tensor) else np.asarray(negatives, dtype=np.float64)
    return ContrastiveBatch(ops.row_normalize(z_hat), ops.row_normalize(z_pos), _unit_rows(neg), tau)


def info_nce(batch: ContrastiveBatch, include_positive_in_denominator: bool = True) -> Tensor:
    """Mean over anchors of -log(exp(a.p/tau) / sum exp(.../tau)).

    The denominator runs over the negatives, plus the positive when
    ``include_positive_in_denominator``. Negatives are constants.
    """
    if batch.tau <= 0:
        raise ConfigError(f"temperature must be positive, got {batch.tau}")
    neg = batch.negatives.data if isinstance(batch.negatives, Tensor) else np.asarray(batch.negatives)
    if neg.ndim != 2 or len(neg) == 0:
        raise ConfigError("info_nce needs at least one negative")
    a, p = batch.anchors_hat, batch.positives
    n = a.shape[0]
    inv_tau = 1.0 / batch.tau
    pos = ops.mul(ops.rowwise_dot(a, p), inv_tau)
    neg_logits = ops.mul(ops.matmul(a, Tensor(neg.T)), inv_tau)
    if include_positive_in_denominator:
        logits = ops.concat([ops.reshape(pos, (n, 1)), neg_logits], axis=1)
    else:
        logits = neg_logits
    per_anchor = ops.sub(ops.logsumexp(logits, axis=1), pos)
    return ops.mul(ops.sum(per_anchor), 1.0 / n)


def clbdsc_forward(
    encoder,
    se_layer: SelfExpressiveCoefficients,
    bank: MemoryBank,
    X_batch: np.ndarray,
    batch_indices,
    spec: AugmentationSpec,
    alpha: float,
    beta: float,
    tau: float,
    rng: np.random.Generator,
    epoch: int = 0,
    step: int = 0,
    include_positive_in_denominator: bool = True,
) -> tuple[Tensor, dict]:
    """One CLBDSC loss evaluation; writes the clean-view latents into ``bank``.

    The anchor is the self-expressed latent; the positive is the encoding of
    an augmented view; negatives are every bank row outside the batch.
    Normalization happens only inside the InfoNCE term.
    """
    idx = np.asarray(batch_indices, dtype=np.int64)
    z = encoder(Tensor(X_batch))
    z_pos = encoder(Tensor(augment_batch(X_batch, spec, rng)))
    bank.write_batch(idx, z, epoch, step)
    z_hat = reconstruct_batch(se_layer, bank, idx, z)
    norms = np.linalg.norm(z_hat.data, axis=1)
    bad = np.flatnonzero(norms < ops.ROW_NORM_FLOOR)
    if bad.size:
        raise DegenerateError(f"self-expressed anchor for sample {int(idx[bad[0]])} has zero norm")
    outside = np.ones(bank.N, dtype=bool)
    outside[idx] = False
    batch = make_contrastive_batch(z_hat, z_pos, bank.Z[outside], tau)
    nce = info_nce(batch, include_positive_in_denominator)
    se = se_loss(z, z_hat)
    reg = reg_loss(se_layer)
    total = total_loss(nce, se, reg, alpha, beta)
    if not np.isfinite(total.data).all():
        raise NumericError(f"non-finite CLBDSC loss at step {step}")
    diagnostics = {"nce": nce.item(), "se": se.item(), "reg": reg.item(), "total": total.item()}
    return total, diagnostics
