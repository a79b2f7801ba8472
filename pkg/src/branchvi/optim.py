"""Adam with a piecewise-constant step-drop schedule.

The optimizer maximizes the ELBO; internally the update runs as descent on
the negated gradient (sign handled here, callers pass ascent gradients).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradientError


@dataclass
class AdamState:
    m: np.ndarray
    s: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float):
    """One bias-corrected ascent step; rejects non-finite gradients."""
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NonFiniteGradientError(f"non-finite gradient at flat index {bad}")
    g = -grads  # descent on -ELBO
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    s = state.beta2 * state.s + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    s_hat = s / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(s_hat) + state.eps)
    return AdamState(m, s, t, state.beta1, state.beta2, state.eps), new_params


@dataclass
class LrSchedule:
    base: float
    drop_every: int = 50_000
    drop_factor: float = 0.1
    max_drops: int = 3

    def __post_init__(self):
        if self.drop_every <= 0:
            raise ValueError("drop_every must be positive")


def lr_at(sched: LrSchedule, t: int) -> float:
    """lr(t) = base * drop_factor ** min(floor(t / drop_every), max_drops)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    drops = min(t // sched.drop_every, sched.max_drops)
    return sched.base * sched.drop_factor ** drops
