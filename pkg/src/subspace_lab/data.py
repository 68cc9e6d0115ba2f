"""Datasets: synthetic union-of-subspaces generation, PGM ingestion, resizing,
deterministic batching and the binary tensor file format."""

from __future__ import annotations

import csv
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, ParseError

TENSOR_MAGIC = b"SCTD"


@dataclass
class Dataset:
    """Samples stacked along axis 0; labels (if known) are dense ids 0..K-1."""

    X: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.X),):
                raise DatasetError(f"{len(self.labels)} labels for {len(self.X)} samples")
            uniq = np.unique(self.labels)
            if not np.array_equal(uniq, np.arange(len(uniq))):
                raise DatasetError("labels must be dense ids 0..K-1")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.X.shape[1:]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1


# synthetic data ---------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    n_subspaces: int = 5
    subspace_dim: int = 4
    ambient_dim: int = 30
    points_per_subspace: int = 50
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_subspaces < 1 or self.subspace_dim < 1:
            raise ConfigError("n_subspaces and subspace_dim must be positive")
        if self.subspace_dim >= self.ambient_dim:
            raise ConfigError(
                f"subspace_dim ({self.subspace_dim}) must be smaller than ambient_dim ({self.ambient_dim})"
            )
        if self.points_per_subspace <= self.subspace_dim:
            raise ConfigError(
                f"identifiability: points_per_subspace ({self.points_per_subspace}) must exceed "
                f"subspace_dim ({self.subspace_dim})"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def gen_union_of_subspaces(spec: SynthSpec) -> Dataset:
    """Unit-norm points drawn from random linear subspaces, grouped by subspace."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    blocks, labels = [], []
    for j in range(spec.n_subspaces):
        basis, _ = np.linalg.qr(rng.standard_normal((spec.ambient_dim, spec.subspace_dim)))
        coeffs = rng.standard_normal((spec.points_per_subspace, spec.subspace_dim))
        pts = coeffs @ basis.T
        if spec.noise_sigma > 0:
            pts = pts + spec.noise_sigma * rng.standard_normal(pts.shape)
        blocks.append(pts / np.linalg.norm(pts, axis=1, keepdims=True))
        labels.append(np.full(spec.points_per_subspace, j))
    name = f"synth-{spec.n_subspaces}x{spec.subspace_dim}in{spec.ambient_dim}"
    return Dataset(np.vstack(blocks), np.concatenate(labels), name)


# batching -----------------------------------------------------------------------


@dataclass(frozen=True)
class BatchSchedule:
    order: np.ndarray
    batch_size: int

    @property
    def k(self) -> int:
        return -(-len(self.order) // self.batch_size)

    @property
    def batches(self) -> list[np.ndarray]:
        return [self.order[i : i + self.batch_size] for i in range(0, len(self.order), self.batch_size)]


def split_batches(n_samples: int, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0) -> BatchSchedule:
    if not 1 <= batch_size <= n_samples:
        raise ConfigError(f"batch_size must be in [1, {n_samples}], got {batch_size}")
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n_samples)
    else:
        order = np.arange(n_samples)
    return BatchSchedule(order, batch_size)


# tensor file format ---------------------------------------------------------------


def save_tensor(path, array) -> None:
    """Write ``SCTD`` + u32 ndim + u32 dims + float64 data, all little-endian."""
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim == 0 or 0 in arr.shape:
        raise ConfigError(f"cannot save tensor with shape {arr.shape}")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ParseError(f"{path}: truncated header at byte offset {len(raw)}")
    if raw[:4] != TENSOR_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if ndim == 0:
        raise ParseError(f"{path}: empty shape (ndim=0) at byte offset 4")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end:
        raise ParseError(f"{path}: truncated dims at byte offset {len(raw)}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    if 0 in dims:
        raise ParseError(f"{path}: zero-length dimension in shape {dims} at byte offset 8")
    expected = dims_end + 8 * int(np.prod(dims))
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(raw)} (data starts at byte offset {dims_end})")
    return np.frombuffer(raw, dtype="<f8", offset=dims_end).reshape(dims).astype(np.float64)


def save_labels(path, labels) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label"])
        for i, lab in enumerate(labels):
            writer.writerow([i, int(lab)])


def load_labels(path) -> np.ndarray:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["sample_id", "label"]:
            raise ParseError(f"{path}: expected header 'sample_id,label', got {header}")
        rows = [(int(a), int(b)) for a, b in reader]
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ParseError(f"{path}: sample ids must be 0..N-1")
    return np.array([r[1] for r in rows], dtype=np.int64)


def save_dataset(prefix, ds: Dataset) -> tuple[Path, Path | None]:
    prefix = Path(prefix)
    tpath = prefix.with_suffix(".sctd")
    save_tensor(tpath, ds.X)
    lpath = None
    if ds.labels is not None:
        lpath = prefix.with_suffix(".labels.csv")
        save_labels(lpath, ds.labels)
    return tpath, lpath


def load_dataset(tensor_path, labels_path=None, name: str | None = None) -> Dataset:
    X = load_tensor(tensor_path)
    labels = load_labels(labels_path) if labels_path else None
    return Dataset(X, labels, name or Path(tensor_path).stem)


# PGM images ----------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(#[^\n]*\n)|(\S+)")


def read_pgm(path) -> np.ndarray:
    """Parse a binary (P5) PGM with maxval <= 255; returns values scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = _PGM_TOKEN.search(raw, pos)
        if m is None:
            raise ParseError(f"{path}: truncated PGM header")
        pos = m.end()
        if m.group(2) is not None:
            tokens.append(m.group(2))
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: expected magic P5, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PGM header") from exc
    if not 0 < maxval <= 255 or width <= 0 or height <= 0:
        raise ParseError(f"{path}: unsupported PGM header {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = raw[pos : pos + width * height]
    if len(pixels) != width * height:
        raise ParseError(f"{path}: expected {width * height} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DatasetError(f"write_pgm expects a 2-D image, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def load_pgm_dir(path, pattern: str = "class_*/img_*.pgm", size: tuple[int, int] | None = None) -> Dataset:
    """Load ``root/<class dir>/<image>.pgm``; labels follow sorted class directory names."""
    root = Path(path)
    files = sorted(root.glob(pattern))
    if not files:
        raise DatasetError(f"no files matching {pattern!r} under {root}")
    class_dirs = sorted({f.parent.relative_to(root).as_posix() for f in files})
    class_index = {d: i for i, d in enumerate(class_dirs)}
    images, labels = [], []
    for f in files:
        img = read_pgm(f)
        if size is not None:
            img = resize(img[None], *size)[0]
        if images and img.shape != images[0].shape:
            raise DatasetError(f"{f}: shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        labels.append(class_index[f.parent.relative_to(root).as_posix()])
    return Dataset(np.stack(images)[:, None], np.array(labels), root.name)


# resizing ------------------------------------------------------------------------


def _interp_axis(in_size: int, out_size: int):
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize of [..., h, w] with half-pixel centers; result clamped to [0, 1]."""
    if target_h <= 0 or target_w <= 0:
        raise ConfigError(f"resize targets must be positive, got {target_h}x{target_w}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    if (h, w) == (target_h, target_w):
        return np.clip(img, 0.0, 1.0)
    r0, r1, fy = _interp_axis(h, target_h)
    c0, c1, fx = _interp_axis(w, target_w)
    top = img[..., r0, :] * (1 - fy)[:, None] + img[..., r1, :] * fy[:, None]
    out = top[..., c0] * (1 - fx) + top[..., c1] * fx
    return np.clip(out, 0.0, 1.0)
