"""From-scratch Adam and EMA loss-term normalization.

Both are deliberately tiny and dependency-free: the fitting loops need a
bias-corrected Adam whose per-group learning rates are expressed as an
elementwise lr array, and a scalar magnitude tracker used to normalize loss
terms of wildly different scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros_like(params: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(params), np.zeros_like(params))


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState | None,
              lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new params, new state).

    ``lr`` may be a scalar or an array broadcastable against ``params``
    (per-group learning rates are expressed by an elementwise lr vector).
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise ShapeMismatch(f"params {params.shape} vs grad {grad.shape}")
    if state is None:
        state = AdamState.zeros_like(params)
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad ** 2
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new_params = params - np.asarray(lr) * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


@dataclass
class EmaState:
    raw: float = 0.0
    t: int = 0
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must be in (0, 1)")

    @property
    def corrected(self) -> float:
        if self.t == 0:
            return 0.0
        return self.raw / (1.0 - self.decay ** self.t)


def ema_normalize(value, state: EmaState):
    """Divide ``value`` by its running magnitude; returns (normalized, state).

    The tracker state is updated with |value| first, so a constant input
    normalizes to exactly 1 from the very first call (bias-corrected EMA).
    ``value`` may be a float or a torch scalar; the normalizer itself is
    always treated as a constant (no gradient flows through it).
    """
    mag = abs(float(value.detach() if hasattr(value, "detach") else value))
    new_state = EmaState(state.decay * state.raw + (1 - state.decay) * mag,
                         state.t + 1, state.decay)
    return value / (new_state.corrected + 1e-8), new_state


@dataclass
class EmaBank:
    """Named EMA normalizers sharing one decay."""

    decay: float = 0.99
    states: dict = field(default_factory=dict)

    def normalize(self, name: str, value):
        state = self.states.get(name) or EmaState(decay=self.decay)
        normalized, self.states[name] = ema_normalize(value, state)
        return normalized
