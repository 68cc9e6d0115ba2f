"""Verification suites behind ``subspace-lab check``.

Each suite returns a list of result rows ``{"name", "value", "tol", "passed"}``.
The oracles here (finite differences, brute-force label mappings, direct
contingency sums, block-diagonal affinities) share no code with the paths
they check beyond the public entry points.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable

import numpy as np

from . import ops
from .clustering import acc, nmi, spectral_cluster
from .config import RunConfig
from .contrastive import ContrastiveBatch, info_nce
from .gradcheck import check_gradients
from .memory_bank import MemoryBank
from .nn import build_dense_autoencoder
from .selfexpress import SelfExpressiveCoefficients, reconstruct_batch, reg_loss, se_loss, total_loss
from .tensor import Tensor
from .trainer import equivalence_check

GRAD_TOL = 1e-4
EQUIV_TOL = 1e-10
NMI_TOL = 1e-12


def _row(name: str, value: float, tol: float, passed: bool | None = None) -> dict:
    return {"name": name, "value": float(value), "tol": tol, "passed": bool(value < tol if passed is None else passed)}


# gradient suite ---------------------------------------------------------------------


def _t(rng, *shape, grad=True, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=grad)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(w)))


def _composite_case(rng):
    """Encoder -> bank -> C -> decoder loss with every parameter as an input."""
    n_samples, batch = 7, np.array([1, 4, 5])
    ae = build_dense_autoencoder(5, [4, 3], activation="gelu", batchnorm=True, bias=True, seed=int(rng.integers(1 << 30)))
    se = SelfExpressiveCoefficients(n_samples, init="noise", scale=0.3, seed=int(rng.integers(1 << 30)))
    X = rng.standard_normal((n_samples, 5))
    bank = MemoryBank(n_samples, 3)
    bank.write_batch(np.arange(n_samples), rng.standard_normal((n_samples, 3)), 0, 0)
    params = [p for _, p in ae.named_parameters()] + [se.C]

    def fn(*_):
        x = Tensor(X[batch])
        z = ae.encode(x)
        bank.write_batch(batch, z, 1, 1)
        z_hat = reconstruct_batch(se, bank, batch, z)
        recon = ops.frobenius_sq(ae.decode(z_hat), x)
        return total_loss(recon, se_loss(z, z_hat), reg_loss(se), 50.0, 1.0)

    return fn, params


def _info_nce_case(include: bool):
    def make(rng):
        a, p = _t(rng, 4, 3), _t(rng, 4, 3)
        neg = rng.standard_normal((6, 3))
        neg /= np.linalg.norm(neg, axis=1, keepdims=True)

        def fn(a, p):
            batch = ContrastiveBatch(ops.row_normalize(a), ops.row_normalize(p), neg, 0.5)
            return info_nce(batch, include)

        return fn, [a, p]

    return make


def _bn_case(mode):
    def make(rng):
        x, g, b = _t(rng, 4, 3), _t(rng, 3), _t(rng, 3)
        w = rng.standard_normal((4, 3))
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
        return (lambda x, g, b: _weighted(ops.batchnorm(x, g, b, rm.copy(), rv.copy(), mode=mode), w)), [x, g, b]

    return make


def _simple(build: Callable, *shapes):
    def make(rng):
        inputs = [_t(rng, *s) for s in shapes]
        probe = build(*inputs)
        w = rng.standard_normal(probe.shape)
        return (lambda *xs: _weighted(build(*xs), w)), inputs

    return make


def gradient_cases() -> dict[str, Callable]:
    def recon_case(rng):
        n = 5
        se = SelfExpressiveCoefficients(n, init="noise", scale=0.5, seed=int(rng.integers(1 << 30)))
        bank = MemoryBank(n, 3)
        bank.write_batch(np.arange(n), rng.standard_normal((n, 3)), 0, 0)
        idx = np.array([0, 2])
        z = _t(rng, 2, 3)
        w = rng.standard_normal((2, 3))
        return (lambda C, z: _weighted(reconstruct_batch(se, bank, idx, z), w)), [se.C, z]

    def se_case(rng):
        n = 3
        se = SelfExpressiveCoefficients(n, init="noise", scale=0.5, seed=int(rng.integers(1 << 30)))
        bank = MemoryBank(n, 4)
        bank.write_batch(np.arange(n), rng.standard_normal((n, 4)), 0, 0)
        idx = np.array([1])
        z = _t(rng, 1, 4)
        return (lambda C, z: se_loss(z, reconstruct_batch(se, bank, idx, z))), [se.C, z]

    def reg_case(rng):
        se = SelfExpressiveCoefficients(4, init="noise", scale=1.0, seed=int(rng.integers(1 << 30)))
        return (lambda C: reg_loss(se)), [se.C]

    return {
        "matmul": _simple(ops.matmul, (3, 4), (4, 2)),
        "linear": _simple(lambda x, w, b: ops.linear(x, w, b), (3, 4), (2, 4), (2,)),
        "add_bias_4d": _simple(ops.add_bias, (2, 3, 2, 2), (3,)),
        "conv2d_s1": _simple(lambda x, k: ops.conv2d(x, k, 1), (2, 2, 5, 5), (3, 2, 3, 3)),
        "conv2d_s2": _simple(lambda x, k: ops.conv2d(x, k, 2), (1, 1, 5, 5), (1, 1, 3, 3)),
        "deconv2d_s2": _simple(lambda y, k: ops.deconv2d(y, k, 2, (5, 5)), (2, 3, 3, 3), (3, 2, 3, 3)),
        "relu": _simple(ops.relu, (4, 5)),
        "gelu": _simple(ops.gelu, (4, 5)),
        "tanh": _simple(ops.tanh, (4, 5)),
        "batchnorm_train": _bn_case("train"),
        "batchnorm_eval": _bn_case("eval"),
        "reshape": _simple(lambda x: ops.reshape(x, (4, 6)), (2, 3, 4)),
        "flatten": _simple(ops.flatten, (2, 3, 4)),
        "frobenius_sq": lambda rng: ((lambda a, b: ops.frobenius_sq(a, b)), [_t(rng, 3, 4), _t(rng, 3, 4)]),
        "row_normalize": _simple(ops.row_normalize, (4, 3)),
        "logsumexp": _simple(lambda x: ops.logsumexp(x, 1), (3, 5)),
        "index_rows": _simple(lambda x: ops.index_rows(x, np.array([2, 0, 2])), (4, 3)),
        "reconstruct_batch": recon_case,
        "se_loss": se_case,
        "reg_loss": reg_case,
        "info_nce_inclusive": _info_nce_case(True),
        "info_nce_literal": _info_nce_case(False),
        "composite_total_loss": _composite_case,
    }


def run_grad_suite(instances: int = 5, seed: int = 0) -> list[dict]:
    rows = []
    for name, make in gradient_cases().items():
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, name))])
            fn, inputs = make(rng)
            worst = max(worst, max(check_gradients(fn, inputs)))
        rows.append(_row(f"grad:{name}", worst, GRAD_TOL))
    return rows


# equivalence suite ------------------------------------------------------------------


def equivalence_config() -> RunConfig:
    """250-sample synthetic set, dense autoencoder with batchnorm, shuffle off."""
    return RunConfig(
        method="bdsc", widths=[16, 12], activation="gelu", batchnorm=True, bias=True, shuffle=False,
        pretrain_epochs=0, c_init="noise", lr=1e-3,
    )


def run_equiv_suite(steps: int = 10, cfg: RunConfig | None = None) -> list[dict]:
    res = equivalence_check(cfg or equivalence_config(), steps=steps)
    return [
        _row("equiv:max_param_dev", res["max_param_dev"], EQUIV_TOL),
        _row("equiv:max_loss_dev", res["max_loss_dev"], EQUIV_TOL),
    ]


# metric suite -----------------------------------------------------------------------


def brute_force_acc(pred, truth) -> float:
    """Best fraction of matches over every one-to-one relabeling, by enumeration."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    pu, tu = list(np.unique(pred)), list(np.unique(truth))
    size = max(len(pu), len(tu))
    pu += [None] * (size - len(pu))
    best = 0
    for perm in itertools.permutations(range(size)):
        hits = 0
        for pi, ti in enumerate(perm):
            if pu[pi] is None or ti >= len(tu):
                continue
            hits += int(np.sum((pred == pu[pi]) & (truth == tu[ti])))
        best = max(best, hits)
    return best / len(pred)


def direct_nmi(pred, truth) -> float:
    """2 I / (H_p + H_r) summed term by term over the contingency table."""
    pred, truth = list(pred), list(truth)
    n = len(pred)
    ps, ts = sorted(set(pred)), sorted(set(truth))
    hp = -math.fsum((pred.count(a) / n) * math.log(pred.count(a) / n) for a in ps)
    ht = -math.fsum((truth.count(b) / n) * math.log(truth.count(b) / n) for b in ts)
    if hp + ht == 0:
        return 1.0
    mi_terms = []
    for a in ps:
        for b in ts:
            nab = sum(1 for x, y in zip(pred, truth) if x == a and y == b)
            if nab:
                mi_terms.append(nab / n * math.log(nab * n / (pred.count(a) * truth.count(b))))
    return 2.0 * math.fsum(mi_terms) / (hp + ht)


def block_affinity(sizes: list[int], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random symmetric affinity whose blocks are dense and mutually disconnected."""
    n = sum(sizes)
    truth = np.repeat(np.arange(len(sizes)), sizes)
    W = np.zeros((n, n))
    for k in range(len(sizes)):
        idx = np.flatnonzero(truth == k)
        B = rng.uniform(0.1, 1.0, (len(idx), len(idx)))
        W[np.ix_(idx, idx)] = B + B.T
    np.fill_diagonal(W, 0.0)
    perm = rng.permutation(n)
    return W[np.ix_(perm, perm)], truth[perm]


def run_metrics_suite(pairs: int = 100, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    acc_bad, nmi_err = 0, 0.0
    for _ in range(pairs):
        n = int(rng.integers(2, 40))
        kp, kt = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        pred, truth = rng.integers(0, kp, n), rng.integers(0, kt, n)
        acc_bad += acc(pred, truth) != brute_force_acc(pred, truth)
        nmi_err = max(nmi_err, abs(nmi(pred, truth) - direct_nmi(pred, truth)))
    rows = [
        _row("metrics:acc_mismatches", acc_bad, 1, passed=acc_bad == 0),
        _row("metrics:nmi_max_abs_err", nmi_err, NMI_TOL, passed=nmi_err <= NMI_TOL),
    ]
    for k in (2, 3, 5):
        sizes = list(rng.integers(3, 12, size=k))
        W, truth = block_affinity(sizes, rng)
        score = acc(spectral_cluster(W, k, seed=seed), truth)
        rows.append(_row(f"metrics:spectral_blocks_k{k}", 1.0 - score, 1e-12, passed=score == 1.0))
    return rows


SUITES = {"grads": run_grad_suite, "equiv": run_equiv_suite, "metrics": run_metrics_suite}
