from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


def adam_update(params: dict, grads: dict, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                weight_decay: float = 0.0) -> None:
    """In-place Adam(W) step."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay and p.ndim > 1:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
