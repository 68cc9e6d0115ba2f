"""Affinity construction, spectral clustering and the ACC / NMI scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .errors import ConfigError, DimensionError, NumericError, ParseError

DEGREE_FLOOR = 1e-12
KMEANS_RESTARTS = 20
KMEANS_MAX_ITER = 300


def _coeff_array(c) -> np.ndarray:
    if hasattr(c, "C"):
        c = c.C
    if hasattr(c, "data") and not isinstance(c, np.ndarray):
        c = c.data
    return np.asarray(c, dtype=np.float64)


def build_affinity(c, heuristic: str = "abs_sym", q: int | None = None) -> np.ndarray:
    """W = |C| + |C^T|, optionally keeping only the q largest |C| entries per row first."""
    C = np.abs(_coeff_array(c))
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionError(f"C must be square, got {C.shape}")
    C = C.copy()
    np.fill_diagonal(C, 0.0)
    if heuristic == "abs_sym_threshold":
        if q is None or q < 1:
            raise ConfigError(f"abs_sym_threshold needs q >= 1, got {q}")
        q = min(q, C.shape[1])
        keep = np.argsort(-C, axis=1, kind="stable")[:, :q]
        mask = np.zeros_like(C, dtype=bool)
        np.put_along_axis(mask, keep, True, axis=1)
        C = np.where(mask, C, 0.0)
    elif heuristic != "abs_sym":
        raise ConfigError(f"unknown affinity heuristic {heuristic!r}")
    return C + C.T


def normalized_laplacian(W: np.ndarray) -> np.ndarray:
    deg = W.sum(axis=1)
    deg = np.where(deg > 0, deg, DEGREE_FLOOR)
    inv_sqrt = 1.0 / np.sqrt(deg)
    L = np.eye(len(W)) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    return 0.5 * (L + L.T)


def spectral_embedding(W: np.ndarray, n_clusters: int) -> tuple[np.ndarray, np.ndarray]:
    """Bottom ``n_clusters`` eigenpairs of the symmetric normalized Laplacian."""
    L = normalized_laplacian(np.asarray(W, dtype=np.float64))
    try:
        vals, vecs = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed on {L.shape} Laplacian (finite={np.isfinite(L).all()}): {exc}") from exc
    return vals[:n_clusters], vecs[:, :n_clusters]


def spectral_cluster(W: np.ndarray, n_clusters: int, seed: int = 0) -> np.ndarray:
    if n_clusters < 2:
        raise ConfigError(f"n_clusters must be >= 2, got {n_clusters}")
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or len(W) < n_clusters:
        raise DimensionError(f"affinity {W.shape} cannot be split into {n_clusters} clusters")
    _, emb = spectral_embedding(W, n_clusters)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.where(norms > 0, norms, 1.0)
    km = KMeans(n_clusters=n_clusters, init="k-means++", n_init=KMEANS_RESTARTS, max_iter=KMEANS_MAX_ITER, random_state=seed)
    return km.fit_predict(emb).astype(np.int64)


# metrics ----------------------------------------------------------------------------


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(np.int64)
    truth = np.asarray(truth).astype(np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DimensionError(f"label arrays differ in shape: {pred.shape} vs {truth.shape}")
    return pred, truth


def contingency(pred, truth) -> np.ndarray:
    pred, truth = _check_pair(pred, truth)
    _, p = np.unique(pred, return_inverse=True)
    _, r = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1, r.max() + 1), dtype=np.int64)
    np.add.at(table, (p, r), 1)
    return table


def best_mapping(pred, truth) -> dict[int, int]:
    """Optimal one-to-one map from predicted cluster ids to true class ids."""
    pred, truth = _check_pair(pred, truth)
    pu, tu = np.unique(pred), np.unique(truth)
    table = contingency(pred, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return {int(pu[i]): int(tu[j]) for i, j in zip(rows, cols)}


def acc(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    if pred.size == 0:
        return 1.0
    table = contingency(pred, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / pred.size)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth) -> float:
    """2 I(p, r) / (H(p) + H(r)) with natural logs; 1.0 when both are single-cluster."""
    pred, truth = _check_pair(pred, truth)
    n = pred.size
    table = contingency(pred, truth).astype(np.float64)
    hp = _entropy(table.sum(axis=1), n)
    hr = _entropy(table.sum(axis=0), n)
    if hp + hr == 0.0:
        return 1.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    return float(min(max(2.0 * mi / (hp + hr), 0.0), 1.0))


@dataclass
class ClusterResult:
    labels: np.ndarray
    acc: float | None = None
    nmi: float | None = None
    assignment: dict[int, int] = field(default_factory=dict)
    affinity: np.ndarray | None = None

    def summary(self) -> dict:
        return {"acc": self.acc, "nmi": self.nmi, "n_clusters": int(len(np.unique(self.labels)))}


def cluster_coefficients(c, n_clusters: int, truth=None, heuristic: str = "abs_sym", q: int | None = None, seed: int = 0) -> ClusterResult:
    W = build_affinity(c, heuristic, q)
    labels = spectral_cluster(W, n_clusters, seed)
    result = ClusterResult(labels=labels, affinity=W)
    if truth is not None:
        result.acc = acc(labels, truth)
        result.nmi = nmi(labels, truth)
        result.assignment = best_mapping(labels, truth)
    return result


def save_predictions(path, pred, truth=None) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "pred", "truth"])
        for i, p in enumerate(pred):
            writer.writerow([i, int(p), "" if truth is None else int(truth[i])])


def load_predictions(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "pred" not in reader.fieldnames:
            raise ParseError(f"{path}: expected a 'pred' column")
        rows = list(reader)
    pred = np.array([int(r["pred"]) for r in rows], dtype=np.int64)
    if all(r.get("truth") not in (None, "") for r in rows):
        return pred, np.array([int(r["truth"]) for r in rows], dtype=np.int64)
    return pred, None
