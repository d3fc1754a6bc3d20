"""Minimal reverse-mode autodiff over numpy arrays.

The training graph of this model is small and fixed (a handful of dense
layers, softmax/sigmoid heads, the emission algebra and a weighted
log-likelihood), so we carry gradients with a lightweight tape instead of
a full framework.  Every op stores a backward closure; `backward()` walks
the graph in reverse topological order and accumulates gradients on the
leaves that requested them.

All data is float64: the finite-difference checks in the test suite run
at 1e-4 relative tolerance, which float32 cannot sustain.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ddim = grad.ndim - len(shape)
    if ddim > 0:
        grad = grad.sum(axis=tuple(range(ddim)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad or p._parents for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _needs_graph(self):
        return self.requires_grad or bool(self._parents)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)
        return Tensor._make(self.data + other.data, (self, other), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        def bwd(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))
        return Tensor._make(self.data * other.data, (self, other), bwd)

    __rmul__ = __mul__

    def __sub__(self, other):
        other = as_tensor(other)
        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)
        return Tensor._make(self.data - other.data, (self, other), bwd)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __truediv__(self, other):
        other = as_tensor(other)
        def bwd(g):
            return (_unbroadcast(g / other.data, self.shape),
                    _unbroadcast(-g * self.data / other.data**2, other.shape))
        return Tensor._make(self.data / other.data, (self, other), bwd)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        # constant exponent only
        def bwd(g):
            return (g * p * self.data ** (p - 1.0),)
        return Tensor._make(self.data ** p, (self,), bwd)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        def bwd(g):
            return g @ other.data.T, self.data.T @ g
        return Tensor._make(self.data @ other.data, (self, other), bwd)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        src = self.shape
        def bwd(g):
            return (g.reshape(src),)
        return Tensor._make(self.data.reshape(*shape), (self,), bwd)

    def transpose(self, *axes):
        inv = np.argsort(axes)
        def bwd(g):
            return (g.transpose(inv),)
        return Tensor._make(self.data.transpose(axes), (self,), bwd)

    def __getitem__(self, idx):
        # basic indexing only (ints/slices); fancy gathers go through
        # take()/gather_last(), which handle repeated indices
        def bwd(g):
            full = np.zeros_like(self.data)
            full[idx] += g
            return (full,)
        return Tensor._make(self.data[idx], (self,), bwd)

    def take(self, indices, axis: int):
        """Gather along `axis` with an integer index vector (may repeat)."""
        indices = np.asarray(indices)
        def bwd(g):
            full = np.zeros_like(self.data)
            sl = [slice(None)] * self.data.ndim
            for out_pos, src_pos in enumerate(indices):
                sl_out = list(sl)
                sl_out[axis] = out_pos
                sl_in = list(sl)
                sl_in[axis] = src_pos
                full[tuple(sl_in)] += g[tuple(sl_out)]
            return (full,)
        return Tensor._make(np.take(self.data, indices, axis=axis), (self,), bwd)

    def sum(self, axis=None, keepdims=False):
        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, self.shape).copy(),)
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- nonlinearities -----------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        def bwd(g):
            return (g * out_data,)
        return Tensor._make(out_data, (self,), bwd)

    def log(self):
        def bwd(g):
            return (g / self.data,)
        return Tensor._make(np.log(self.data), (self,), bwd)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        def bwd(g):
            return (g * out_data * (1.0 - out_data),)
        return Tensor._make(out_data, (self,), bwd)

    def softmax(self, axis: int):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
        def bwd(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return (out_data * (g - dot),)
        return Tensor._make(out_data, (self,), bwd)

    def clip(self, lo=None, hi=None):
        inside = np.ones_like(self.data, dtype=bool)
        if lo is not None:
            inside &= self.data >= lo
        if hi is not None:
            inside &= self.data <= hi
        def bwd(g):
            return (g * inside,)
        return Tensor._make(np.clip(self.data, lo, hi), (self,), bwd)

    # -- backward -----------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select with a constant condition mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    def bwd(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))
    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bwd)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tuple(tensors), bwd)


def maximum(t: Tensor, floor: float) -> Tensor:
    """max(t, floor) with pass-through gradient where t > floor."""
    t = as_tensor(t)
    mask = t.data > floor
    def bwd(g):
        return (g * mask,)
    return Tensor._make(np.maximum(t.data, floor), (t,), bwd)


def gather_last(t: Tensor, idx: np.ndarray) -> Tensor:
    """t[..., idx] along the last axis with a batched integer index.

    `idx` must have shape t.shape[:-1]; the result drops the last axis.
    """
    idx = np.asarray(idx)
    grid = np.ix_(*[np.arange(n) for n in idx.shape])
    def bwd(g):
        full = np.zeros_like(t.data)
        np.add.at(full, grid + (idx,), g)
        return (full,)
    return Tensor._make(t.data[grid + (idx,)], (t,), bwd)
