"""Decoupled-weight-decay adaptive-moment optimizer with a cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            step=0,
        )


def lr_at(step: int, total: int, lr0: float, lr_floor: float, warmup: int = 0) -> float:
    """Cosine schedule lr_floor + 0.5*(lr0 - lr_floor)*(1 + cos(pi*step/total)),
    with an optional linear warmup prefix."""
    if warmup > 0 and step < warmup:
        return lr0 * (step + 1) / warmup
    frac = step / total if total > 0 else 1.0
    return lr_floor + 0.5 * (lr0 - lr_floor) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               weight_decay: float = 0.01) -> None:
    """One update over all parameters (sorted by name for a fixed order).

    Gradients must already be populated; a non-finite gradient aborts with the
    offending parameter name and step.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(np.sum(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + EPS) + weight_decay * p.data)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def scale_grads(params: dict[str, Tensor], factor: float) -> None:
    for p in params.values():
        if p.grad is not None:
            p.grad *= factor
