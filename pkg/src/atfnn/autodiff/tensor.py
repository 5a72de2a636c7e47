"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Operations
record parent links and a backward closure; calling ``backward()`` on a
scalar loss walks the graph once in reverse topological order and
accumulates exact analytic gradients into every tensor that requires
them. The graph is released afterwards.

Broadcasting is supported for singleton dimensions (including missing
leading dimensions); gradients of broadcast operands are reduced back
over the expanded axes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph bookkeeping ------------------------------------------------

    def _trace(self, parents, backward) -> "Tensor":
        """Attach parents/backward if recording is on and any parent needs grad."""
        if _grad_enabled and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = tuple(parents)
            self._backward = backward
        return self

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        The loss must be scalar. The traversal visits each node exactly
        once in reverse topological order, then drops parent links so the
        graph (and its saved activations) can be collected.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss, got shape %s" % (self.data.shape,))
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a_shape, b_shape) -> None:
    for x, y in zip(reversed(a_shape), reversed(b_shape)):
        if x != y and x != 1 and y != 1:
            raise ValueError(f"shapes {a_shape} and {b_shape} are not broadcast-compatible")


# -- elementwise primitives -----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return out._trace((a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return out._trace((a, b), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = expit(x.data)
    out = Tensor(y)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * y * (1.0 - y))

    return out._trace((x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - y * y))

    return out._trace((x,), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0.0))

    return out._trace((x,), backward)


def texp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    out = Tensor(y)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * y)

    return out._trace((x,), backward)


def tlog(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.log(x.data))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return out._trace((x,), backward)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics, including stacked batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data).reshape(a.shape)
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g).reshape(b.shape)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return out._trace((a, b), backward)


# -- shape manipulation -----------------------------------------------------


def reshape(x, *shape) -> Tensor:
    x = _as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return out._trace((x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inv))

    return out._trace((x,), backward)


def getitem(x, idx) -> Tensor:
    """Basic slicing (ints/slices); gradient scatters back into place."""
    x = _as_tensor(x)
    out = Tensor(np.ascontiguousarray(x.data[idx]))

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[idx] += g
            x.accumulate_grad(buf)

    return out._trace((x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(p)

    return out._trace(tuple(tensors), backward)


def repeat_groups(x, k: int, axis: int) -> Tensor:
    """Repeat each entry k times along an axis (group weight duplication).

    Gradient sums over each group of k repeats.
    """
    x = _as_tensor(x)
    out = Tensor(np.repeat(x.data, k, axis=axis))
    ax = axis if axis >= 0 else x.ndim + axis

    def backward(g):
        if x.requires_grad:
            shape = x.shape[:ax] + (x.shape[ax], k) + x.shape[ax + 1:]
            x.accumulate_grad(g.reshape(shape).sum(axis=ax + 1))

    return out._trace((x,), backward)


# -- reductions --------------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if not x.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True))

    return out._trace((x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if not x.requires_grad:
            return
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        x.accumulate_grad(np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True))

    return out._trace((x,), backward)


def backward(loss: Tensor) -> None:
    """Functional alias for ``loss.backward()``."""
    loss.backward()
