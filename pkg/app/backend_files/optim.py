"""AdamW with decoupled weight decay, operating on Parameter leaves."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ShapeMismatchError
from .tensor import Parameter


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
               lr: float, wd: float, betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> Tuple[List[np.ndarray], AdamState]:
    """
    One AdamW update.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
    with the decay term using theta before the update.

    Returns:
        (new parameter arrays, new state); inputs are left untouched
    """
    if len(params) != len(grads):
        raise ShapeMismatchError(f"{len(params)} parameters but {len(grads)} gradients")
    beta1, beta2 = betas
    if not state.m:
        m_prev = [np.zeros_like(p) for p in params]
        v_prev = [np.zeros_like(p) for p in params]
    else:
        m_prev, v_prev = state.m, state.v
    step = state.step + 1

    new_params, new_m, new_v = [], [], []
    for theta, g, m, v in zip(params, grads, m_prev, v_prev):
        if theta.shape != g.shape or theta.shape != m.shape:
            raise ShapeMismatchError(f"AdamW: parameter {theta.shape} vs gradient {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_params.append(theta - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * wd * theta)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step, new_m, new_v)


class AdamW:
    """Keeps the moment state for a fixed list of parameters"""

    def __init__(self, params: Sequence[Parameter], lr: float, weight_decay: float,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: Dict[int, np.ndarray]) -> None:
        """Apply gradients keyed by parameter node_id (missing ones count as zero)"""
        arrays = [p.data for p in self.params]
        aligned = [grads.get(p.node_id, np.zeros(p.shape)) for p in self.params]
        updated, self.state = adamw_step(arrays, aligned, self.state, self.lr,
                                         self.weight_decay, self.betas, self.eps)
        for param, values in zip(self.params, updated):
            param.assign(values)
