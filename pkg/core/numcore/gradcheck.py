"""
Central finite-difference checks of tape gradients.
Run under precision(np.float64); 32-bit differences are too noisy to be useful.
"""
from typing import Callable, Dict, Sequence

import numpy as np

from core.numcore.tensor import Tape, Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    tensor.data = np.ascontiguousarray(tensor.data)
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2 * step)
    return grad


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                    floor: float = 1e-12) -> Dict[int, float]:
    """
    Compare tape gradients of the scalar fn() with central differences for each tensor.
    fn must rebuild its graph from the tensors on every call. Returns the relative
    error per tensor position; floor bounds the scale from below so tensors whose
    true gradient is zero (a bias feeding batch norm) compare on absolute error.
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(loss, tape)
    errors = {}
    for position, tensor in enumerate(tensors):
        errors[position] = relative_error(grads[tensor], numeric_gradient(fn, tensor, step), floor)
    return errors


def max_relative_error(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                       floor: float = 1e-12) -> float:
    return max(check_gradients(fn, tensors, step, floor).values())
