"""Central finite-difference gradient checking."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, h: float = 1e-5) -> np.ndarray:
    x = inputs[index]
    grad = np.zeros_like(x.data)
    with no_grad():
        for pos in np.ndindex(x.data.shape):
            orig = x.data[pos]
            x.data[pos] = orig + h
            fp = fn(*inputs).item()
            x.data[pos] = orig - h
            fm = fn(*inputs).item()
            x.data[pos] = orig
            grad[pos] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Norm-wise relative error; falls back to the absolute error for vanishing gradients.

    Differencing noise is around h**2 plus rounding/h, so gradients below
    ``floor`` (e.g. a bias feeding straight into batchnorm) are compared absolutely.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Relative error between analytic and numerical gradients, per input that requires grad.

    Inputs that do not require grad are skipped (reported as 0.0).
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    errors = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            errors.append(0.0)
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors.append(relative_error(analytic, numerical_grad(fn, inputs, i, h)))
    return errors
