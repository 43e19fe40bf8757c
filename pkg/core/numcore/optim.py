"""
ADAM, and plain gradient descent for comparison sweeps, both with multiplicative
parameter decay.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from core.exceptions import DimensionError
from core.numcore.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1.0
    step: int = 0
    skipped: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def moments_for(self, name: str, like: np.ndarray):
        if name not in self.first_moment:
            self.first_moment[name] = np.zeros_like(like)
            self.second_moment[name] = np.zeros_like(like)
        return self.first_moment[name], self.second_moment[name]


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
              lr: Optional[float] = None) -> Dict[str, Tensor]:
    """
    One bias-corrected ADAM update of every named parameter, followed by
    multiplication with state.weight_decay. Tensors whose gradient is not finite
    keep their values and are counted in state.skipped.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    correction1 = 1 - state.beta1 ** t
    correction2 = 1 - state.beta2 ** t

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise DimensionError(f"adam_step: gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")
        if not np.all(np.isfinite(grad)):
            state.skipped += 1
            logger.warning("Skipping update of '%s': non-finite gradient (step %d)", name, t)
            continue
        grad = grad.astype(param.dtype, copy=False)
        m, v = state.moments_for(name, param.data)
        m = (state.beta1 * m + (1 - state.beta1) * grad).astype(param.dtype)
        v = (state.beta2 * v + (1 - state.beta2) * grad * grad).astype(param.dtype)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.dtype)
        if state.weight_decay != 1.0:
            param.data = (param.data * param.dtype.type(state.weight_decay)).astype(param.dtype)
    return params


def sgd_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
             lr: Optional[float] = None) -> Dict[str, Tensor]:
    """Plain gradient descent sharing the ADAM bookkeeping; the moment buffers stay empty"""
    lr = state.lr if lr is None else lr
    state.step += 1
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise DimensionError(f"sgd_step: gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")
        if not np.all(np.isfinite(grad)):
            state.skipped += 1
            logger.warning("Skipping update of '%s': non-finite gradient (step %d)", name, state.step)
            continue
        param.data = (param.data - lr * grad.astype(param.dtype, copy=False)).astype(param.dtype)
        if state.weight_decay != 1.0:
            param.data = (param.data * param.dtype.type(state.weight_decay)).astype(param.dtype)
    return params
