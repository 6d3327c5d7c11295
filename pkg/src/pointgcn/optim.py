"""
Adam optimizer over named parameter tensors.

Weight decay is not handled here: the model adds 2 * lambda * w to the
gradients, so the optimizer only ever sees the full gradient.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from common.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moment estimates per parameter name, plus the step count."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """
    One bias-corrected Adam update, applied to ``params`` in place.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)

    Args:
        params: Name -> parameter array, updated in place
        grads: Name -> gradient, same names and shapes
        state: Moment estimates, updated in place (created lazily per name)
        lr: Learning rate

    Returns:
        The updated state
    """
    if not lr > 0:
        raise ConfigError(f"Learning rate must be positive, got {lr}")
    if set(params) != set(grads):
        raise ShapeError(f"Gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"Gradient for {name} has shape {grads[name].shape}, parameter has {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"Adam state for {name} has shape {state.m[name].shape}, parameter has {p.shape}")

    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t

    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)

    return state
