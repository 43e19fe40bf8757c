"""
Dense tensors and the reverse-mode tape.

Operations are recorded only while a Tape is active, so plain forward passes
(rollouts, evaluation, target computation) cost nothing extra. backward() walks
the records of one tape in exact reverse order.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.exceptions import DimensionError, UsageError

logger = logging.getLogger(__name__)

_default_dtype = np.float32
_active_tapes: List["Tape"] = []

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[..., Sequence[Optional[np.ndarray]]]


def get_default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype of newly created tensors (64-bit for gradient checks)"""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        from core.numcore.ops import matmul
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int) -> "Tensor":
        return reduce_max(self, axis=axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class TapeRecord:
    inputs: Tuple[Tensor, ...]
    outputs: Tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of executed operations, used as a context manager"""
    records: List[TapeRecord] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _current_tape() -> Optional[Tape]:
    return _active_tapes[-1] if _active_tapes else None


def record(inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
    """Register an executed operation if a tape is active and any input needs gradients"""
    tape = _current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    tape.records.append(TapeRecord(tuple(inputs), tuple(outputs), backward_fn))


class Gradients:
    """Gradients produced by backward(), looked up by tensor"""

    def __init__(self):
        self._grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    def accumulate(self, tensor: Tensor, grad: np.ndarray) -> None:
        key = id(tensor)
        if key in self._grads:
            self._grads[key] = (tensor, self._grads[key][1] + grad)
        else:
            self._grads[key] = (tensor, np.array(grad, dtype=tensor.dtype))

    def get(self, tensor: Tensor) -> Optional[np.ndarray]:
        entry = self._grads.get(id(tensor))
        return entry[1] if entry is not None else None

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self.get(tensor)
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def for_params(self, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
        return {name: self[p] for name, p in params.items()}


def backward(loss: Tensor, tape: Tape) -> Gradients:
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not any(loss is out for rec in tape.records for out in rec.outputs):
        raise UsageError("loss was not produced through the given tape")

    grads = Gradients()
    grads.accumulate(loss, np.ones_like(loss.data))
    for rec in reversed(tape.records):
        out_grads = [grads.get(out) for out in rec.outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = [np.zeros_like(out.data) if g is None else g for out, g in zip(rec.outputs, out_grads)]
        in_grads = rec.backward(*out_grads)
        for tensor, grad in zip(rec.inputs, in_grads):
            if grad is not None and tensor.requires_grad:
                grads.accumulate(tensor, grad)
    return grads


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, dtype=a.dtype)
    record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, dtype=a.dtype)
    record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))
    return out


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, dtype=a.dtype)
    record((a, b), (out,), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))
    return out


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data, dtype=a.dtype)

    def _backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    record((a, b), (out,), _backward)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, dtype=a.dtype)
    record((a,), (out,), lambda g: (-g,))
    return out


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    record((a,), (out,), _backward)
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry"""
    idx = np.argmax(a.data, axis=axis)
    out = Tensor(np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis), dtype=a.dtype)

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    record((a,), (out,), _backward)
    return out


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor(data, dtype=a.dtype)
    record((a,), (out,), lambda g: (g.reshape(a.shape),))
    return out


def getitem(a: Tensor, index) -> Tensor:
    out = Tensor(a.data[index], dtype=a.dtype)

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    record((a,), (out,), _backward)
    return out


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = Tensor(data, dtype=tensors[0].dtype)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    record(tensors, (out,), _backward)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in tensors]}")
    out = Tensor(data, dtype=tensors[0].dtype)

    def _backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    record(tensors, (out,), _backward)
    return out
