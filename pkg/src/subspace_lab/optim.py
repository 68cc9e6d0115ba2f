"""Adam with bias correction and optional per-prefix learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError
from .tensor import ParameterSet


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # parameter-id prefix -> learning rate; the longest matching prefix wins
    group_lr: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or any(lr <= 0 for lr in self.group_lr.values()):
            raise ConfigError("learning rates must be positive")

    def lr_for(self, name: str) -> float:
        best, lr = -1, self.lr
        for prefix, value in self.group_lr.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, lr = len(prefix), value
        return lr


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """Apply one Adam update to every parameter, then clear the gradients."""
    missing = [k for k in params if params[k].grad is None]
    if missing:
        raise StateError(f"adam_step: no gradient for {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in params:
        p = params[name]
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr_for(name) * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
