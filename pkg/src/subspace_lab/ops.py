"""Differentiable operations on :class:`~subspace_lab.tensor.Tensor`.

Elementwise binary ops require equal shapes or a Python scalar operand; there
is no general broadcasting. Bias addition has its own op.
"""

from __future__ import annotations

import math
from numbers import Real
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, DimensionError
from .tensor import Tensor, as_tensor

ROW_NORM_FLOOR = 1e-12
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def _check_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    if isinstance(b, Real) and not isinstance(a, Real):
        a = as_tensor(a)
        return Tensor._from_op(a.data + float(b), (a,), lambda g: (g,), "add_scalar")
    if isinstance(a, Real):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if isinstance(b, Real):
        return add(a, -float(b))
    if isinstance(a, Real):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if isinstance(a, Real):
        a, b = b, a
    a = as_tensor(a)
    if isinstance(b, Real):
        s = float(b)
        return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,), "scale")
    b = as_tensor(b)
    _check_same_shape("mul", a, b)
    return Tensor._from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    t = np.tanh(GELU_C * (v + GELU_K * v**3))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return Tensor._from_op(out, (x,), backward, "gelu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "tanh":
        return tanh(x)
    if kind in ("identity", "none", None):
        return x
    raise ConfigError(f"unknown activation {kind!r}")


# reductions and shape ---------------------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), backward, "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1:
        raise DimensionError(f"reshape: at most one -1 allowed in {shape}")
    if -1 in shape:
        prod = int(np.prod(known)) if known else 1
        if prod == 0 or x.size % prod:
            raise DimensionError(f"reshape: cannot reshape {x.shape} into {shape}")
    elif int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot reshape {x.shape} ({x.size} elements) into {shape}")
    in_shape = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(in_shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading axis."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return Tensor._from_op(x.data.T.copy(), (x,), lambda g: (g.T.copy(),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def logsumexp(x: Tensor, axis: int = 1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._from_op(out, (x,), backward, "logsumexp")


# linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D input) bias."""
    if bias.ndim != 1 or x.ndim not in (2, 4) or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {bias.shape} to {x.shape}")
    if x.ndim == 2:
        out = x.data + bias.data[None, :]
        axes: tuple[int, ...] = (0,)
    else:
        out = x.data + bias.data[None, :, None, None]
        axes = (0, 2, 3)
    return Tensor._from_op(out, (x, bias), lambda g: (g, g.sum(axis=axes)), "add_bias")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T (+ bias); weight is [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        return gx, gw

    out = Tensor._from_op(x.data @ weight.data.T, (x, weight), backward, "linear")
    return out if bias is None else add_bias(out, bias)


def index_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; gradient scatters back with accumulation."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError(f"index_rows: row index out of range for {n} rows")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(x.data[index], (x,), backward, "index_rows")


def scatter_rows(base: np.ndarray, index: np.ndarray, rows: Tensor) -> Tensor:
    """Return a copy of constant ``base`` with ``base[index]`` replaced by ``rows``.

    Only ``rows`` receives gradient; ``base`` is treated as a constant.
    """
    index = np.asarray(index, dtype=np.int64)
    if len(np.unique(index)) != len(index):
        raise IndexError("scatter_rows: duplicate row indices")
    if base.ndim != 2 or rows.ndim != 2 or base.shape[1] != rows.shape[1] or rows.shape[0] != len(index):
        raise DimensionError(f"scatter_rows: rows {rows.shape} do not fit base {base.shape} at {len(index)} indices")
    if index.size and (index.min() < 0 or index.max() >= base.shape[0]):
        raise IndexError(f"scatter_rows: row index out of range for {base.shape[0]} rows")
    out = np.array(base, dtype=np.float64, copy=True)
    out[index] = rows.data
    return Tensor._from_op(out, (rows,), lambda g: (g[index],), "scatter_rows")


# losses and normalization -------------------------------------------------------


def frobenius_sq(a: Tensor, b) -> Tensor:
    """Sum of squared differences ``||a - b||_F^2``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("frobenius_sq", a, b)
    d = a.data - b.data

    def backward(g):
        return 2.0 * g * d, -2.0 * g * d

    return Tensor._from_op(np.asarray(np.sum(d * d)), (a, b), backward, "frobenius_sq")


def row_normalize(x: Tensor, floor: float = ROW_NORM_FLOOR) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"row_normalize expects [n, h], got {x.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] < floor)
    if bad.size:
        raise DegenerateError(f"row_normalize: row {int(bad[0])} has norm {norms[bad[0], 0]:.3g} < {floor:g}")
    y = x.data / norms

    def backward(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return Tensor._from_op(y, (x,), backward, "row_normalize")


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b), axis=1)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    mode: str = "train",
    momentum: float = 0.9,
) -> Tensor:
    """Batch normalization over [n, f] features or [n, c, h, w] channels.

    In train mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim == 2:
        axes: tuple[int, ...] = (0,)
        view = (1, -1)
    elif x.ndim == 4:
        axes = (0, 2, 3)
        view = (1, -1, 1, 1)
    else:
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: gamma/beta {gamma.shape} do not match {x.shape[1]} features")
    g_, b_ = gamma.data.reshape(view), beta.data.reshape(view)

    if mode == "eval":
        invstd = 1.0 / np.sqrt(running_var.reshape(view) + eps)
        xhat = (x.data - running_mean.reshape(view)) * invstd

        def backward_eval(g):
            return g * g_ * invstd, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

        return Tensor._from_op(g_ * xhat + b_, (x, gamma, beta), backward_eval, "batchnorm_eval")
    if mode != "train":
        raise ConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[0] < 2:
        raise DegenerateError(f"batchnorm in train mode needs at least 2 samples, got {x.shape[0]}")

    m = x.size // x.shape[1]
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mean.reshape(-1)
    running_var *= momentum
    running_var += (1.0 - momentum) * var.reshape(-1)

    def backward(g):
        dxhat = g * g_
        gx = (invstd / m) * (
            m * dxhat - np.sum(dxhat, axis=axes, keepdims=True) - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True)
        )
        return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return Tensor._from_op(g_ * xhat + b_, (x, gamma, beta), backward, "batchnorm")


# convolution ---------------------------------------------------------------------


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for "same" convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int):
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    oh, pt, pb = same_padding(h, kh, stride)
    ow, pl, pr = same_padding(w, kw, stride)
    return oh, ow, (pt, pb, pl, pr)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, stride: int, oh: int, ow: int, padded_hw, pads):
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    hp, wp = padded_hw
    xp = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    pt, pb, pl, pr = pads
    return xp[:, :, pt : hp - pb, pl : wp - pr]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with "same" zero padding; output is ceil(h/stride) x ceil(w/stride)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    oh, ow, pads = _conv_geometry(h, w, kh, kw, stride)
    pt, pb, pl, pr = pads
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = kernel.data.reshape(o, -1)
    out = (w2 @ cols).reshape(n, o, oh, ow)

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        gk = np.einsum("nop,nkp->ok", g2, cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(w2.T @ g2, c, kh, kw, stride, oh, ow, xp.shape[2:], pads)
        return gx, gk

    return Tensor._from_op(out, (x, kernel), backward, "conv2d")


def deconv2d(y: Tensor, kernel: Tensor, stride: int = 1, output_hw: tuple[int, int] | None = None) -> Tensor:
    """Transposed convolution: the exact adjoint of :func:`conv2d` with the same kernel.

    ``kernel`` has the conv2d layout [o, c, kh, kw]; ``y`` has o channels and the
    output has c. ``output_hw`` defaults to (stride * oh, stride * ow).
    """
    if y.ndim != 4 or kernel.ndim != 4 or y.shape[1] != kernel.shape[0]:
        raise DimensionError(f"deconv2d: input {y.shape} incompatible with kernel {kernel.shape}")
    n, o, oh, ow = y.shape
    _, c, kh, kw = kernel.shape
    h, w = output_hw if output_hw is not None else (oh * stride, ow * stride)
    eh, ew, pads = _conv_geometry(h, w, kh, kw, stride)
    if (eh, ew) != (oh, ow):
        raise DimensionError(f"deconv2d: output {h}x{w} with stride {stride} implies input {eh}x{ew}, got {oh}x{ow}")
    pt, pb, pl, pr = pads
    padded_hw = (h + pt + pb, w + pl + pr)
    w2 = kernel.data.reshape(o, -1)
    y2 = y.data.reshape(n, o, oh * ow)
    out = _col2im(w2.T @ y2, c, kh, kw, stride, oh, ow, padded_hw, pads)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        gcols = _im2col(gp, kh, kw, stride, oh, ow)
        gy = (w2 @ gcols).reshape(y.shape) if y.requires_grad else None
        gk = np.einsum("nop,nkp->ok", y2, gcols).reshape(kernel.shape) if kernel.requires_grad else None
        return gy, gk

    return Tensor._from_op(np.ascontiguousarray(out), (y, kernel), backward, "deconv2d")
