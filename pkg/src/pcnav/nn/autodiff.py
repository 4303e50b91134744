"""Reverse-mode autodiff on numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional backward closure and the
parent tensors it was computed from.  Calling ``backward()`` on a scalar loss
walks the tape in reverse topological order and accumulates gradients into
every tensor with ``requires_grad``.  Arrays stay in whatever float width
they were created with, so running a model in float64 (for finite-difference
checks) is just a matter of building float64 parameters.

Reduction tie rules are part of the contract: ``max`` routes the gradient to
the first (lowest-index) maximal element, and ``minimum`` prefers its first
argument on ties.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward passes only)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """An ndarray node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, parents=(), bwd=None, requires_grad=None):
        self.data = np.asarray(data)
        self.grad = None
        if requires_grad is None:
            requires_grad = bool(parents) and grad_enabled() and any(
                p.requires_grad for p in parents)
        self.requires_grad = requires_grad and grad_enabled()
        if self.requires_grad and parents:
            self._parents = tuple(parents)
            self._bwd = bwd
        else:
            self._parents = ()
            self._bwd = None

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: several ops hand the same array to multiple parents
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        topo = []
        seen = set()
        stack = [(self, iter(self._parents))]
        seen.add(id(self))
        while stack:
            node, it = stack[-1]
            child = next(it, None)
            if child is None:
                topo.append(node)
                stack.pop()
            elif id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._parents)))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- arithmetic -------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            a._accum(_unbroadcast(g * b.data, a.shape))
            b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            a._accum(_unbroadcast(g / b.data, a.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor(a.data / b.data, (a, b), bwd)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out = a.data ** p

        def bwd(g):
            a._accum(g * p * a.data ** (p - 1))

        return Tensor(out, (a,), bwd)

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        return Tensor(a.data @ b.data, (a, b), bwd)

    def __getitem__(self, key):
        a = self

        def bwd(g):
            gx = np.zeros_like(a.data)
            gx[key] = g
            a._accum(gx)

        return Tensor(a.data[key], (a,), bwd)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor(a.data.reshape(shape), (a,),
                      lambda g: a._accum(g.reshape(old)))

    # -- elementwise nonlinearities ----------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor(a.data * mask, (a,), lambda g: a._accum(g * mask))

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor(out, (a,), lambda g: a._accum(g * out))

    def log(self):
        a = self
        return Tensor(np.log(a.data), (a,), lambda g: a._accum(g / a.data))

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor(out, (a,), lambda g: a._accum(g * (1.0 - out * out)))

    def sigmoid(self):
        a = self
        out = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor(out, (a,),
                      lambda g: a._accum(g * out * (1.0 - out)))

    def clip(self, lo: float, hi: float):
        """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
        a = self
        inside = (a.data >= lo) & (a.data <= hi)
        return Tensor(np.clip(a.data, lo, hi), (a,),
                      lambda g: a._accum(g * inside))

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        shape = a.data.shape

        def bwd(g):
            if axis is None:
                a._accum(np.broadcast_to(g, shape).astype(a.data.dtype))
                return
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, shape).astype(a.data.dtype))

        return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims=False):
        """Max along one axis; ties send the gradient to the lowest index."""
        a = self
        idx = np.argmax(a.data, axis=axis)  # first occurrence
        idx_e = np.expand_dims(idx, axis)
        out = np.take_along_axis(a.data, idx_e, axis=axis)

        def bwd(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            gx = np.zeros_like(a.data)
            np.put_along_axis(gx, idx_e, gg, axis=axis)
            a._accum(gx)

        data = out if keepdims else out.squeeze(axis)
        return Tensor(data, (a,), bwd)


# -- free functions over several tensors -----------------------------------

def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the first argument receives the gradient."""
    take_a = a.data <= b.data

    def bwd(g):
        a._accum(_unbroadcast(g * take_a, a.shape))
        b._accum(_unbroadcast(g * ~take_a, b.shape))

    return Tensor(np.where(take_a, a.data, b.data), (a, b), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bwd(g):
        for i, t in enumerate(tensors):
            t._accum(np.take(g, i, axis=axis))

    return Tensor(np.stack([t.data for t in tensors], axis=axis),
                  tuple(tensors), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Fancy-index the leading axis; backward scatter-adds (repeats stack)."""
    idx = np.asarray(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accum(gx)

    return Tensor(x.data[idx], (x,), bwd)


def take_along(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Pick one element per slice along ``axis`` (e.g. chosen-action rows)."""
    idx = np.asarray(idx)
    idx_e = np.expand_dims(idx, axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_e, np.expand_dims(g, axis), axis=axis)
        x._accum(gx)

    out = np.take_along_axis(x.data, idx_e, axis=axis).squeeze(axis)
    return Tensor(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        x._accum(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return Tensor(out, (x,), bwd)
