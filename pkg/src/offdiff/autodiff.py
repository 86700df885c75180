"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for the graph network: each op builds a ``Tensor``
holding its value, its parents, and a closure that maps the output
cotangent to parent cotangent contributions. ``backward`` walks the
recorded graph in reverse topological order. Ops support the broadcasting
the forward pass uses; gradients are un-broadcast by summing over expanded
axes.

Gradients accumulate in ``Tensor.grad``. Calling ``backward`` clears the
cotangents of the subgraph it touches first, so several backward passes
over one forward graph (e.g. one per task loss) stay independent.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "constant", "parameter", "add", "sub", "mul", "scale", "matmul",
    "sigmoid", "silu", "square", "tsum", "gather_rows", "scatter_add_rows",
    "layer_norm", "log_softmax", "backward",
]


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp          # grad_out -> tuple of parent grad contributions
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)
    return Tensor(a.value + b.value, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)
    return Tensor(a.value - b.value, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))
    return Tensor(a.value * b.value, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (g * c,)
    return Tensor(a.value * c, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return g @ b.value.T, a.value.T @ g
    return Tensor(a.value @ b.value, (a, b), vjp)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.value))

    def vjp(g):
        return (g * s * (1.0 - s),)
    return Tensor(s, (a,), vjp)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.value))
    out = a.value * s

    def vjp(g):
        return (g * (s + out * (1.0 - s)),)
    return Tensor(out, (a,), vjp)


def square(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * 2.0 * a.value,)
    return Tensor(a.value**2, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)
    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


class RowScatter:
    """Reusable row scatter-add plan for a fixed index vector.

    Sorting once and summing contiguous segments with ``np.add.reduceat``
    is several times faster than ``np.add.at`` when the same indices are
    used across many calls (as they are within one batch).
    """

    def __init__(self, idx, num_rows: int):
        idx = np.asarray(idx)
        self.idx = idx
        self.num_rows = int(num_rows)
        self.order = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.order]
        if len(sorted_idx) == 0:
            self.starts = np.zeros(0, dtype=np.int64)
            self.rows = np.zeros(0, dtype=np.int64)
        else:
            boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
            self.starts = np.concatenate([[0], boundaries])
            self.rows = sorted_idx[self.starts]

    def apply(self, values):
        out = np.zeros((self.num_rows,) + values.shape[1:], dtype=np.float64)
        if len(self.order):
            out[self.rows] = np.add.reduceat(values[self.order], self.starts, axis=0)
        return out


def gather_rows(a: Tensor, idx, plan: RowScatter = None) -> Tensor:
    """y = a[idx]; supply a RowScatter plan (idx -> a's rows) to speed backward."""
    idx = np.asarray(idx)

    def vjp(g):
        if plan is not None:
            return (plan.apply(g),)
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)
    return Tensor(a.value[idx], (a,), vjp)


def scatter_add_rows(a: Tensor, idx, num_rows: int, plan: RowScatter = None) -> Tensor:
    """out[r] = sum of a[i] over i with idx[i] == r; rows never written stay 0."""
    idx = np.asarray(idx)
    if plan is not None:
        out = plan.apply(a.value)
    else:
        out = np.zeros((num_rows,) + a.value.shape[1:], dtype=np.float64)
        np.add.at(out, idx, a.value)

    def vjp(g):
        return (g[idx],)
    return Tensor(out, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the learnable affine pair."""
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value

    def vjp(g):
        dgamma = _unbroadcast(g * xhat, gamma.value.shape)
        dbeta = _unbroadcast(g, beta.value.shape)
        gx = g * gamma.value
        # d/dx of (x - mu) * inv with mu and inv both functions of x
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta
    return Tensor(out, (x, gamma, beta), vjp)


def log_softmax(a: Tensor) -> Tensor:
    m = a.value.max(axis=-1, keepdims=True)
    z = a.value - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return Tensor(out, (a,), vjp)


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order  # parents before children


def backward(outputs, output_grads=None):
    """Reverse-accumulate cotangents from one or more output tensors.

    ``outputs`` may be a single Tensor or a list; ``output_grads`` supplies
    the seed cotangent per output (defaults to ones, i.e. sum of outputs).
    Touched tensors get fresh ``grad`` arrays, so repeated calls on the
    same graph do not mix.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if output_grads is None:
        output_grads = [np.ones_like(o.value) for o in outputs]

    order = []
    seen = set()
    for out in outputs:
        for node in _topo_order(out):
            if id(node) not in seen:
                seen.add(id(node))
                order.append(node)
    for node in order:
        node.grad = None
    for out, g in zip(outputs, output_grads):
        g = np.asarray(g, dtype=np.float64)
        out.grad = g if out.grad is None else out.grad + g

    # order has parents before children; reverse it for backprop
    for node in reversed(order):
        if node.vjp is None or not node.parents or node.grad is None:
            continue
        contributions = node.vjp(node.grad)
        for parent, contrib in zip(node.parents, contributions):
            if parent.requires_grad or parent.parents:
                parent.grad = contrib if parent.grad is None else parent.grad + contrib
    # leaves that the outputs do not depend on keep an explicit zero
    for node in order:
        if node.grad is None and node.requires_grad and not node.parents:
            node.grad = np.zeros_like(node.value)
