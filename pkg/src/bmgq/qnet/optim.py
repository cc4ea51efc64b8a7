"""Adam, global-norm gradient clipping and Polyak averaging over ``NetworkParams``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .network import NetworkParams


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: NetworkParams) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.items()},
                   v={k: np.zeros_like(a) for k, a in params.items()}, t=0)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)`` and leaves the inputs untouched."""
    if list(params) != list(grads):
        raise ValueError("gradient layers do not match parameter layers")
    if not grads.is_finite():
        raise ValueError("non-finite gradient passed to adam_step")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new, m_out, v_out = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"layer {name}: gradient shape {g.shape} != {theta.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new[name] = theta - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_out[name], v_out[name] = m, v
    return NetworkParams(params.config, new), AdamState(m_out, v_out, t)


def global_norm(grads: NetworkParams) -> float:
    return math.sqrt(math.fsum(float(np.dot(g.ravel(), g.ravel())) for _, g in grads.items()))


def clip_gradient(grads: NetworkParams, threshold: float) -> NetworkParams:
    """Rescale to L2 norm ``threshold`` when the global norm exceeds it."""
    if not threshold > 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold or math.isinf(threshold):
        return grads
    scale = threshold / norm
    return NetworkParams(grads.config, {k: g * scale for k, g in grads.items()})


def polyak_update(target: NetworkParams, online: NetworkParams, rho: float) -> NetworkParams:
    """theta_target <- rho * theta_online + (1 - rho) * theta_target."""
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    if rho == 1:
        return online.copy()
    # incremental form: exact fixed point when target == online
    return NetworkParams(target.config, {k: t + rho * (online[k] - t) for k, t in target.items()})
