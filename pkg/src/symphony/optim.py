"""AdamW without bias correction and with an additive decoupled weight decay."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = GOLDEN
    beta2: float = 0.995
    weight_decay: float = 0.01
    eps: float = 1e-8
    sqrt_divisor: bool = False  # standard Adam sqrt(v); the training variants turn it on
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0
    rejected: int = 0


def init_state(params: dict[str, np.ndarray], **kwargs) -> OptimState:
    state = OptimState(**kwargs)
    for k, p in params.items():
        state.m[k] = np.zeros_like(p)
        state.v[k] = np.zeros_like(p)
    return state


def step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> bool:
    """One in-place update. Returns False, leaving everything untouched, on a non-finite gradient.

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    theta <- theta - lr (m / (v + eps) + wd theta)
    """
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        if not np.all(np.isfinite(g)):
            state.rejected += 1
            log.warning("rejected optimizer step: non-finite gradient in %s", k)
            return False
    b1, b2, lr, wd, eps = state.beta1, state.beta2, state.lr, state.weight_decay, state.eps
    for k, g in grads.items():
        m, v, p = state.m[k], state.v[k], params[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = (np.sqrt(v) if state.sqrt_divisor else v) + eps
        p -= lr * (m / denom + wd * p)
    state.steps += 1
    return True
