"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a float64 ndarray and remembers how it was computed.
``Tensor.backward()`` walks the graph in reverse topological order and
accumulates ``grad`` arrays on every tensor that requires gradients.
Gradients accumulate across backward calls until ``zero_grad`` is called.

All arithmetic runs in float64 regardless of how values are stored on
disk, so finite-difference oracles can be checked at tight tolerances.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        if not _parents and not np.all(np.isfinite(self.data)):
            raise ValueError("tensor data must be finite")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def as_tensor(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- backward pass --------------------------------------------------------

    def backward(self, seed=None):
        """Propagate gradients from this tensor back to all inputs.

        ``seed`` defaults to 1 and is only legal to omit for scalars; a
        non-scalar tensor needs an explicit upstream gradient.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() needs a scalar loss, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match tensor shape {self.data.shape}"
                )
        order = _topo_order(self)
        grads = {id(self): seed.copy()}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # -- operator overloads ---------------------------------------------------

    def __add__(self, other):
        return add(self, Tensor.as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, Tensor.as_tensor(other))

    def __rsub__(self, other):
        return sub(Tensor.as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, Tensor.as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, Tensor.as_tensor(other))

    def __rtruediv__(self, other):
        return div(Tensor.as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _topo_order(root: Tensor) -> list:
    """Reverse topological order, iterative to survive deep graphs."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and _needs_grad(p):
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, backward, track=True):
    """Build an op result, dropping the graph when untracked or in no_grad."""
    if _grad_enabled and track and any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def flip(a: Tensor, axes) -> Tensor:
    axes = tuple(np.atleast_1d(axes))
    return _make(np.flip(a.data, axes), (a,), lambda g: (np.flip(g, axes),))


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [Tensor.as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [Tensor.as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tuple(tensors), backward)


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis) * (1.0 / n)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is passed through strictly inside
    the interval and zeroed outside."""
    inside = (a.data > lo) & (a.data < hi)
    out = np.clip(a.data, lo, hi)
    return _make(out, (a,), lambda g: (np.where(inside, g, 0.0),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two same-shape tensors, as a scalar."""
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    out = np.vdot(a.data, b.data)
    return _make(out, (a, b), lambda g: (g * b.data, g * a.data))
