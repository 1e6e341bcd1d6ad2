"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``GradTape`` records every differentiable operation executed while it is
active; ``GradTape.backward`` replays the records in exact reverse execution
order, accumulating gradients. Tapes live on a thread-local stack, so
distinct tapes may run on distinct threads; forward evaluation outside any
tape records nothing and is pure.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape():
    """The innermost active GradTape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``data`` is always a contiguous row-major float64 ndarray. After
    ``GradTape.backward``, ``grad`` holds the accumulated gradient (fresh
    per backward pass, never carried over).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # note: ascontiguousarray would promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values with gradient tracking severed."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic sugar; every overload routes through a recorded op.
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, as_tensor(other))

    def __rsub__(self, other):
        return subtract(as_tensor(other), self)

    def __mul__(self, other):
        return multiply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, as_tensor(other))

    def __rtruediv__(self, other):
        return divide(as_tensor(other), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return take(self, key)

    def __pow__(self, exponent):
        if exponent != 2:
            raise ParameterError("only squaring is supported via **")
        return multiply(self, self)


def as_tensor(value) -> Tensor:
    """Wrap scalars / arrays as constant Tensors; pass Tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around the forward pass, then call
    ``backward(loss)``. Replaying in reverse execution order guarantees a
    tensor's gradient is complete before the op that produced it runs its
    backward function.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("GradTape exited out of order")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into .grad for every recorded tensor."""
        if loss.size != 1:
            raise DimensionError("backward requires a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g_out = grads.get(id(rec.out))
            if g_out is None:
                continue
            input_grads = rec.backward(g_out)
            for tensor, g_in in zip(rec.inputs, input_grads):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                seen[key] = tensor
        for key, tensor in seen.items():
            if tensor.requires_grad:
                tensor.grad = grads[key]


def record(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable) -> Tensor:
    """Build an op result, checking finiteness and recording on the tape.

    ``backward(g)`` must return one gradient array (or None) per input.
    Extension point for ops defined in other modules (conv, bilinear
    sampling).
    """
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by {name}")
    stack = _tape_stack()
    needs_grad = bool(stack) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        rec = _Record(out, tuple(inputs), backward)
        for tape in stack:
            tape._records.append(rec)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), backward)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("subtract", a.data - b.data, (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("multiply", a.data * b.data, (a, b), backward)


def divide(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    return record("divide", out_data, (a, b), backward)


def negate(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return record("negate", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record("matmul", a.data @ b.data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    return record("exp", out_data, (a,), lambda g: (g * out_data,))


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; subgradient 0 at exactly 0."""
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out_data > 0.0, out_data, 1.0)
        return (np.where(out_data > 0.0, 0.5 * g / safe, 0.0),)

    return record("sqrt", out_data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at exactly 0."""
    a = as_tensor(a)
    return record("absolute", np.abs(a.data), (a,),
                  lambda g: (g * np.sign(a.data),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data  # ties route the gradient to a

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return record("maximum", np.maximum(a.data, b.data), (a, b), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return record("minimum", np.minimum(a.data, b.data), (a, b), backward)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    pos = a.data >= 0.0

    def backward(g):
        return (g * np.where(pos, 1.0, slope),)

    return record("leaky_relu", np.where(pos, a.data, slope * a.data), (a,),
                  backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,),
                  backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, a.shape).copy(),)

    return record("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,),
                  backward)


def l1_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return tsum(absolute(a), axis=axis, keepdims=keepdims)


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return sqrt(tsum(multiply(a, a), axis=axis, keepdims=keepdims))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return record("reshape", a.data.reshape(shape), (a,),
                  lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, offsets, axis=axis))

    return record("concat", np.concatenate([p.data for p in parts], axis=axis),
                  tuple(parts), backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def backward(g):
        return tuple(np.ascontiguousarray(s)
                     for s in np.moveaxis(g, axis, 0))

    return record("stack", np.stack([p.data for p in parts], axis=axis),
                  tuple(parts), backward)


def take(a: Tensor, key) -> Tensor:
    """Indexing/slicing; fancy integer indexing scatter-adds on backward."""
    a = as_tensor(a)
    out_data = a.data[key]

    def _is_fancy(k):
        if isinstance(k, (np.ndarray, list)):
            return True
        if isinstance(k, tuple):
            return any(isinstance(x, (np.ndarray, list)) for x in k)
        return False

    def backward(g):
        z = np.zeros_like(a.data)
        if _is_fancy(key):
            np.add.at(z, key, g)
        else:
            z[key] = g
        return (z,)

    return record("take", np.array(out_data, copy=True), (a,), backward)


def softmax_columns(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Column-wise softmax of a 2-D tensor at the given temperature.

    Stabilized by per-column max subtraction; every output column sums to 1.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("softmax_columns expects a 2-D tensor")
    if not temperature > 0:
        raise ParameterError("softmax temperature must be positive")
    z = x.data / temperature
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=0, keepdims=True)
        return ((y * (g - dot)) / temperature,)

    return record("softmax_columns", y, (x,), backward)


def finite_difference_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                            epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map one Tensor to a scalar Tensor and be pure. The relative
    error at each coordinate is |analytic - numeric| / (|analytic| +
    |numeric| + 1e-8); the max over coordinates is returned.
    """
    base = Tensor(np.array(point.data, copy=True), requires_grad=True)
    with GradTape() as tape:
        out = fn(base)
        if out.size != 1:
            raise DimensionError("finite_difference_check needs a scalar fn")
        tape.backward(out)
    analytic = base.grad if base.grad is not None else np.zeros_like(base.data)
    analytic = analytic.reshape(-1)

    flat = base.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(fn(Tensor(base.data)).data.reshape(-1)[0])
        flat[i] = orig - epsilon
        f_minus = float(fn(Tensor(base.data)).data.reshape(-1)[0])
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("non-finite evaluation during gradient check")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        rel = abs(analytic[i] - numeric) / (abs(analytic[i]) + abs(numeric) + 1e-8)
        worst = max(worst, rel)
    return worst
