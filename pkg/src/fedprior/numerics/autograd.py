"""Reverse-mode automatic differentiation over numpy float64 arrays.

A :class:`Tensor` wraps an ndarray. Every op that receives at least one
tensor with ``requires_grad`` records its parents and a closure mapping the
output gradient to parent gradients. :func:`backward` walks that graph once
in reverse topological order and then releases it, so a graph is good for a
single backward pass.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import ContractError

# name -> op function; the gradient-check suite iterates over this
REGISTRY: dict = {}


def register(name):
    def deco(fn):
        REGISTRY[name] = fn
        return fn

    return deco


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    """Leaf tensor that gradients are collected for."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def make_node(data, parents, backward):
    """Create an op output; records the graph only when a parent needs it."""
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, leaves):
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``leaves``.

    ``leaves`` is a mapping ``path -> Tensor``; the result maps the same paths
    to ndarrays. Leaves not reachable from ``loss`` get zero gradients.
    The recorded graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        order = _topological(loss)
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        leaf_ids = {id(t) for t in leaves.values()}
        for node in order:
            if id(node) in leaf_ids:
                continue
            node._parents = ()
            node._backward = None
    out = {}
    for path, t in leaves.items():
        g = grads.get(id(t))
        out[path] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)
    return out
