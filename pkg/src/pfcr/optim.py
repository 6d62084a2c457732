"""Adam and cosine annealing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update. ``None`` grads count as zero."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr == 0:
            continue
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


def cosine_lr(step: int, total: int, lr_base: float) -> float:
    """Anneal from ``lr_base`` at step 0 to 0 at ``step == total``."""
    if total < 1 or not 0 <= step <= total:
        raise ValueError(f"need 0 <= step <= total and total >= 1, got step={step}, total={total}")
    return lr_base * (1.0 + math.cos(math.pi * step / total)) / 2.0
