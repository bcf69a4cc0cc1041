"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every differentiable operation records a
backward closure on its output, and ``backward()`` replays the closures in
reverse topological order. The engine is define-by-run and single-threaded:
a graph and its tensors belong to one thread of execution, and each graph
is consumed by exactly one backward pass.

Precision is chosen per tensor at construction (float64 for tight
numerical tests, float32 for training runs); operations follow numpy's
promotion rules. No operation mutates its inputs' data.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

# Additive attention-mask value: large enough to zero out a softmax slot,
# small enough to stay finite in float32 after max subtraction.
BIG_NEG = -1.0e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class GraphConsumedError(RuntimeError):
    """Raised when backward runs twice through the same graph."""


class Tensor:
    """An n-dimensional array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    # -- autodiff -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every reachable leaf.

        `grad` seeds the output adjoint; it defaults to 1 for scalars. The
        traversed graph is marked consumed and cannot be replayed.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"seed gradient shape {grad.shape} != {self.data.shape}")

        order = self._topo_order()
        adjoint: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg
            # Consume the node: its closure holds forward buffers.
            node._consumed = True
            node._backward_fn = None
            node._parents = ()

    def _topo_order(self) -> list["Tensor"]:
        """Reverse topological order of the graph rooted at self."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise GraphConsumedError("graph already consumed by a previous backward pass")
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        order.reverse()
        return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# -- elementwise and shape operations ----------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _from_op(a.data * c, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions broadcast as in numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _from_op(out, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _from_op(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _from_op(out, (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _from_op(out, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=False),)

    return _from_op(out, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _from_op(out, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _from_op(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _from_op(out, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0),)

    return _from_op(out, (a,), backward)


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = np.cos(a.data)

    def backward(g):
        return (-g * np.sin(a.data),)

    return _from_op(out, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is zero in the clamped region."""
    a = _as_tensor(a)
    out = np.maximum(a.data, floor)

    def backward(g):
        return (g * (a.data > floor),)

    return _from_op(out, (a,), backward)


# -- normalizations -----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`; rows sum to 1."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _from_op(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _from_op(out, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv_std
    out = gain.data * xhat + bias.data

    def backward(g):
        gxhat = g * gain.data
        ga = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        return ga, _unbroadcast(ggain, gain.shape), _unbroadcast(gbias, bias.shape)

    return _from_op(out, (a, gain, bias), backward)


# -- indexed access -----------------------------------------------------------


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]` (embedding gather); ids may be any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"ids out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _from_op(out, (table,), backward)


def pick(a, ids: np.ndarray) -> Tensor:
    """Per-row element pick: out[i] = a[i, ids[i]] for a 2-d tensor."""
    a = _as_tensor(a)
    ids = np.asarray(ids)
    n = a.shape[0]
    rows = np.arange(n)
    out = a.data[rows, ids]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, ids), g)
        return (ga,)

    return _from_op(out, (a,), backward)


# -- stochastic ops -----------------------------------------------------------


def dropout(a, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-p) at train
    time so evaluation needs no rescaling. Identity when not training or
    p == 0 (no RNG draw is consumed then)."""
    a = _as_tensor(a)
    if not train or p <= 0.0:
        def backward_id(g):
            return (g,)

        return _from_op(a.data.copy(), (a,), backward_id)
    if rng is None:
        raise ValueError("dropout in train mode needs an RNG")
    if not 0.0 < p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    out = a.data * keep

    def backward(g):
        return (g * keep,)

    return _from_op(out, (a,), backward)
