"""
Layer operations with hand-written backward passes.
Convolutions use zero "same" padding of (k-1)/2 and an im2col layout so the heavy
lifting is a single BLAS matmul per call.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from core.exceptions import ConfigError, DimensionError
from core.numcore.tensor import Tensor, as_tensor, record

ACTIVATIONS = ("relu", "tanh", "sigmoid")
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data, dtype=a.dtype)
    record((a, b), (out,), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "relu":
        y = np.maximum(x.data, 0)
        local = (x.data > 0).astype(x.dtype)
    elif kind == "tanh":
        y = np.tanh(x.data)
        local = 1 - y * y
    elif kind == "sigmoid":
        y = expit(x.data)
        local = y * (1 - y)
    else:
        raise ConfigError(f"unknown activation '{kind}', expected one of {ACTIVATIONS}")
    out = Tensor(y, dtype=x.dtype)
    record((x,), (out,), lambda g: (g * local,))
    return out


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# convolutions

def _check_kernel(kernel: Tensor, stride: int) -> int:
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be [c_out, c_in, k, k], got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"kernel width must be odd, got {k}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return k


def _batched(x: Tensor) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected [c, h, w] or [batch, c, h, w], got {x.shape}")


def _im2col(x: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """[B, C, H, W] -> [B, out_h, out_w, C, k, k] patches of the zero padded input"""
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))


def _col2im(cols: np.ndarray, shape: Tuple[int, ...], k: int, stride: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add [B, oh, ow, C, k, k] patches back to [B, C, H, W]"""
    batch, channels, height, width = shape
    pad = (k - 1) // 2
    out_h, out_w = cols.shape[1], cols.shape[2]
    xp = np.zeros((batch, channels, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    # [B, k, k, C, oh, ow] so every (i, j) slab is contiguous
    patches = np.ascontiguousarray(cols.transpose(0, 4, 5, 3, 1, 2))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += patches[:, i, j]
    return xp[:, :, pad:pad + height, pad:pad + width]


def _flipped_kernel(kernel: np.ndarray) -> np.ndarray:
    """Kernel of the stride-1 adjoint: in/out channels swapped, taps rotated 180 degrees"""
    return np.ascontiguousarray(kernel.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def _conv_forward(x: np.ndarray, kernel: np.ndarray, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    c_out, c_in, k, _ = kernel.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c_in}")
    out_h = -(-x.shape[2] // stride)
    out_w = -(-x.shape[3] // stride)
    cols = _im2col(x, k, stride, out_h, out_w)
    flat = cols.reshape(-1, c_in * k * k) @ kernel.reshape(c_out, -1).T
    out = flat.reshape(x.shape[0], out_h, out_w, c_out).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_adjoint(y: np.ndarray, kernel: np.ndarray, stride: int, shape: Tuple[int, ...]) -> np.ndarray:
    """Apply the transpose of conv2d to y, producing a tensor of the given input shape"""
    c_out, c_in, k, _ = kernel.shape
    batch, _, out_h, out_w = y.shape
    if stride == 1 and (out_h, out_w) == tuple(shape[2:]):
        return _conv_forward(y, _flipped_kernel(kernel), 1)[0]
    flat = y.transpose(0, 2, 3, 1).reshape(-1, c_out) @ kernel.reshape(c_out, -1)
    cols = flat.reshape(batch, out_h, out_w, c_in, k, k)
    return _col2im(cols, shape, k, stride)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, bias: Optional[Tensor] = None) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = _check_kernel(kernel, stride)
    data, squeeze = _batched(x)
    out_data, cols = _conv_forward(data, kernel.data, stride)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, -1, 1, 1)
    out = Tensor(out_data[0] if squeeze else out_data, dtype=x.dtype)
    c_out = kernel.shape[0]

    def _backward(g):
        gb = g[None] if squeeze else g
        g_flat = gb.transpose(0, 2, 3, 1).reshape(-1, c_out)
        g_kernel = (g_flat.T @ cols.reshape(g_flat.shape[0], -1)).reshape(kernel.shape)
        g_x = _conv_adjoint(gb, kernel.data, stride, data.shape)
        grads = [g_x[0] if squeeze else g_x, g_kernel]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    record(inputs, (out,), _backward)
    return out


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, bias: Optional[Tensor] = None) -> Tensor:
    """
    Fractionally strided convolution: the adjoint of conv2d with the same kernel.
    The kernel keeps conv2d's [c_out, c_in, k, k] layout, so x has kernel.shape[0]
    channels and the result has kernel.shape[1] channels at stride times the extent.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = _check_kernel(kernel, stride)
    data, squeeze = _batched(x)
    if data.shape[1] != kernel.shape[0]:
        raise DimensionError(f"conv2d_transpose: input has {data.shape[1]} channels, kernel expects {kernel.shape[0]}")
    batch, _, height, width = data.shape
    out_shape = (batch, kernel.shape[1], height * stride, width * stride)
    out_data = _conv_adjoint(data, kernel.data, stride, out_shape)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, -1, 1, 1)
    out = Tensor(out_data[0] if squeeze else out_data, dtype=x.dtype)
    c_out = kernel.shape[0]

    def _backward(g):
        gb = g[None] if squeeze else g
        g_x, cols = _conv_forward(gb, kernel.data, stride)
        x_flat = data.transpose(0, 2, 3, 1).reshape(-1, c_out)
        g_kernel = (x_flat.T @ cols.reshape(x_flat.shape[0], -1)).reshape(kernel.shape)
        grads = [g_x[0] if squeeze else g_x, g_kernel]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    record(inputs, (out,), _backward)
    return out


# batch normalization

@dataclass
class BatchNormStats:
    """Running per-channel statistics used in infer mode"""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_stats: BatchNormStats, mode: str = "train") -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [batch, c, h, w], got {x.shape}")
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise DimensionError(f"batch_norm: scale/shift must be ({channels},), got {scale.shape} and {shift.shape}")
    shape = (1, channels, 1, 1)

    if mode == "train":
        if x.shape[0] < 2:
            raise ConfigError("batch_norm in train mode needs a batch of at least 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        dtype = running_stats.mean.dtype
        running_stats.mean = (BN_MOMENTUM * running_stats.mean + (1 - BN_MOMENTUM) * mean).astype(dtype)
        running_stats.var = (BN_MOMENTUM * running_stats.var + (1 - BN_MOMENTUM) * var).astype(dtype)
    elif mode == "infer":
        mean, var = running_stats.mean, running_stats.var
    else:
        raise ConfigError(f"batch_norm mode must be 'train' or 'infer', got '{mode}'")

    inv_std = (1.0 / np.sqrt(var + BN_EPSILON)).astype(x.dtype)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = Tensor(x_hat * scale.data.reshape(shape) + shift.data.reshape(shape), dtype=x.dtype)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def _backward(g):
        g_scale = (g * x_hat).sum(axis=(0, 2, 3))
        g_shift = g.sum(axis=(0, 2, 3))
        g_hat = g * scale.data.reshape(shape)
        if mode == "infer":
            g_x = g_hat * inv_std.reshape(shape)
        else:
            g_x = (inv_std.reshape(shape) / count) * (
                count * g_hat
                - g_hat.sum(axis=(0, 2, 3), keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return g_x, g_scale, g_shift

    record((x, scale, shift), (out,), _backward)
    return out


# recurrent cell

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    """
    One LSTM step on a batch. weight is [input + hidden, 4 * hidden] with gate blocks
    ordered (input, forget, candidate, output); bias is [4 * hidden].
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hidden = h.shape[-1]
    if weight.shape != (x.shape[-1] + hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise DimensionError(
            f"lstm_cell: weight {weight.shape} / bias {bias.shape} do not fit "
            f"input {x.shape[-1]} and hidden {hidden}"
        )
    if c.shape != h.shape or x.shape[0] != h.shape[0]:
        raise DimensionError(f"lstm_cell: state shapes {h.shape}, {c.shape} do not match input {x.shape}")

    xh = np.concatenate([x.data, h.data], axis=1)
    z = xh @ weight.data + bias.data
    i = expit(z[:, :hidden])
    f = expit(z[:, hidden:2 * hidden])
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = expit(z[:, 3 * hidden:])
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    h_out = Tensor(h_new, dtype=x.dtype)
    c_out = Tensor(c_new, dtype=x.dtype)
    n_in = x.shape[-1]

    def _backward(g_h, g_c):
        d_o = g_h * tc
        d_c = g_c + g_h * o * (1 - tc * tc)
        d_z = np.concatenate([
            d_c * g * i * (1 - i),
            d_c * c.data * f * (1 - f),
            d_c * i * (1 - g * g),
            d_o * o * (1 - o),
        ], axis=1)
        d_xh = d_z @ weight.data.T
        return d_xh[:, :n_in], d_xh[:, n_in:], d_c * f, xh.T @ d_z, d_z.sum(axis=0)

    record((x, h, c, weight, bias), (h_out, c_out), _backward)
    return h_out, c_out


def unit_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit length; rows with norm below eps become (1, 0, ...) with no gradient"""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    degenerate = norm < eps
    safe = np.where(degenerate, 1, norm)
    y = x.data / safe
    fallback = np.zeros_like(x.data)
    fallback[..., 0] = 1
    y = np.where(degenerate, fallback, y)
    out = Tensor(y, dtype=x.dtype)

    def _backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        grad = (g - y * proj) / safe
        return (np.where(degenerate, 0, grad),)

    record((x,), (out,), _backward)
    return out
