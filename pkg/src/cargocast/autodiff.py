"""Reverse-mode autodiff over dense float64 tensors.

Define-by-run: every op records a node, `backward` walks the tape. The op
set is exactly what the forecasting architectures and the meta-learning
loop need; no broadcasting beyond numpy's, no higher-order gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError


class Tensor:
    """A value in the graph. Gradients accumulate; callers zero between passes."""

    __slots__ = ("data", "grad", "_parents", "_backward_fn")

    def __init__(self, data, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        # Single-pass finiteness guard: any NaN/Inf makes the sum non-finite.
        if not math.isfinite(float(self.data.sum())):
            raise NonFiniteError("tensor holds a non-finite (or sum-overflowing) value")
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward_fn: Callable[[np.ndarray], None] | None = _backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    try:
        return Tensor(data, _parents=parents, _backward_fn=backward_fn)
    except NonFiniteError:
        raise NonFiniteError(f"{op} produced a non-finite value") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return _make("add", out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    return _make("sub", out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make("mul", out, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make("matmul", out, (a, b), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        pieces = np.split(g, bounds[1:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            t._accum(piece)

    return _make("concat", out, tensors, backward_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    n = x.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x._accum(full)

    return _make("slice", out, (x,), backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {x.shape} to {shape}") from None

    def backward_fn(g):
        x._accum(g.reshape(x.data.shape))

    return _make("reshape", out, (x,), backward_fn)


def swap_last(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    x = _wrap(x)
    if x.data.ndim < 2:
        raise ShapeError(f"swap_last: needs >= 2-d, got {x.shape}")
    out = np.swapaxes(x.data, -1, -2)

    def backward_fn(g):
        x._accum(np.swapaxes(g, -1, -2))

    return _make("swap_last", out, (x,), backward_fn)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            x._accum(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _make("sum", out, (x,), backward_fn)


def tensor_mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    out = x.data.mean(axis=axis)
    n = x.data.size if axis is None else x.data.shape[axis]

    def backward_fn(g):
        if axis is None:
            x._accum(np.broadcast_to(g / n, x.data.shape).copy())
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy())

    return _make("mean", out, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)

    def backward_fn(g):
        x._accum(g * (1.0 - out * out))

    return _make("tanh", out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    # Stable in both tails.
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward_fn(g):
        x._accum(g * out * (1.0 - out))

    return _make("sigmoid", out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.maximum(x.data, 0.0)

    def backward_fn(g):
        x._accum(g * (x.data > 0))

    return _make("relu", out, (x,), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        x._accum(out * (g - dot))

    return _make("softmax", out, (x,), backward_fn)


def embedding_gather(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of `table` at integer `indices`; grads scatter-add back."""
    table = _wrap(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_gather: indices must be integers")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_gather: table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding_gather: index out of range for table with {table.data.shape[0]} rows"
        )
    out = table.data[idx]

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accum(full)

    return _make("embedding_gather", out, (table,), backward_fn)


def lstm_cell(
    x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate order (input, forget, cell, output); weight
    matrices are [in, 4H] and [H, 4H], bias [4H]."""
    hidden = h.data.shape[-1]
    if wx.data.shape[-1] != 4 * hidden or wh.data.shape != (hidden, 4 * hidden):
        raise ShapeError(
            f"lstm_cell: wx {wx.shape} / wh {wh.shape} inconsistent with hidden {hidden}"
        )
    z = add(add(matmul(x, wx), matmul(h, wh)), b)
    i_gate = sigmoid(slice_axis(z, -1, 0, hidden))
    f_gate = sigmoid(slice_axis(z, -1, hidden, 2 * hidden))
    g_gate = tanh(slice_axis(z, -1, 2 * hidden, 3 * hidden))
    o_gate = sigmoid(slice_axis(z, -1, 3 * hidden, 4 * hidden))
    c_next = add(mul(f_gate, c), mul(i_gate, g_gate))
    h_next = mul(o_gate, tanh(c_next))
    return h_next, c_next


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(QK^T / sqrt(d_k)) V; `mask` is an additive constant
    (0 where attendable, large negative where not)."""
    d_k = q.data.shape[-1]
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    return matmul(softmax(scores), v)


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d node into every node reachable from `loss`."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    # Iterative topological order; graphs are deeper than Python's recursion limit.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
