"""Tape-free reverse-mode differentiation over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the upstream gradient to parent gradients. Nodes only keep that
bookkeeping when some parent requires a gradient, so eval-mode forwards pay
almost nothing for it.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import math_core as mc
from .errors import LifecycleError, ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return mc.matmul(g, b.data.T), mc.matmul(a.data.T, g)

    return _node(mc.matmul(a.data, b.data), (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _sum_to(g, a.data.shape), _sum_to(g, b.data.shape)

    return _node(a.data + b.data, (a, b), back)


def mul(a, b) -> Tensor:
    """Element-wise product (used for dropout masks and gains)."""
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _sum_to(g * b.data, a.data.shape), _sum_to(g * a.data, b.data.shape)

    return _node(a.data * b.data, (a, b), back)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], (a,), back)


def cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop], (a,), back)


def _concat(parts: Sequence, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        if axis == 0:
            return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def concat_rows(parts: Sequence) -> Tensor:
    return _concat(parts, 0)


def concat_cols(parts: Sequence) -> Tensor:
    return _concat(parts, 1)


def stack_rows(vectors: Sequence) -> Tensor:
    """Stack D-vectors into a ``k x D`` matrix."""
    vecs = [as_tensor(v) for v in vectors]
    return concat_rows([reshape(v, (1, -1)) for v in vecs])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def mean_rows(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.shape[0]
    return _node(mc.mean_pool(a.data), (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def softmax_rows(logits, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax; entries where ``mask`` is False get probability exactly 0."""
    logits = as_tensor(logits)
    x = logits.data if mask is None else np.where(mask, logits.data, logits.data.dtype.type(mc.MASK_NEG))
    y = mc.softmax_rows(x)
    if mask is not None:
        y = np.where(mask, y, 0).astype(y.dtype)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (logits,), back)


def layer_norm(x, gain, bias, eps: float = mc.DEFAULT_LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.data.shape[-1] != x.data.shape[-1] or bias.data.shape[-1] != x.data.shape[-1]:
        raise ShapeError(f"layer_norm length mismatch: x {x.data.shape}, gain {gain.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _sum_to(g * xhat, gain.data.shape), _sum_to(g, bias.data.shape)

    return _node(out.astype(x.data.dtype), (x, gain, bias), back)


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor, grad: np.ndarray) -> None:
    """Accumulate d(root . grad)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not root.requires_grad:
        raise LifecycleError("backward on a tensor that was not recorded with gradients")
    grad = np.asarray(grad, dtype=root.data.dtype)
    if grad.shape != root.data.shape:
        raise ShapeError(f"upstream gradient shape {grad.shape} != output shape {root.data.shape}")
    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
