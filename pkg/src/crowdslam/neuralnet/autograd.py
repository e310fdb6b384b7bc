"""Tape-free reverse-mode differentiation over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes its
gradient to them.  ``backward`` walks the graph in reverse topological order.
Only the operations the predictors need are provided.
"""

from __future__ import annotations

import numpy as np

from crowdslam import kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor(a.data + b.data, _parents=(a, b), _backward=back)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor(-a.data, _parents=(a,), _backward=lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor(a.data * b.data, _parents=(a, b), _backward=back)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

        return Tensor(a.data @ b.data, _parents=(a, b), _backward=back)

    @property
    def T(self):
        a = self
        return Tensor(a.data.T, _parents=(a,), _backward=lambda g: a._accum(g.T))

    def sum(self, axis=None):
        a = self

        def back(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape))
            else:
                a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))

        return Tensor(a.data.sum(axis=axis), _parents=(a,), _backward=back)

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, *shape):
        a = self
        return Tensor(a.data.reshape(*shape), _parents=(a,), _backward=lambda g: a._accum(g.reshape(a.shape)))

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor(a.data[idx], _parents=(a,), _backward=back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return Tensor(x.data * scale, _parents=(x,), _backward=lambda g: x._accum(g * scale))


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, cuts, axis=axis)):
            p._accum(piece)

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts), _backward=back)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accum(full)

    return Tensor(x.data[index], _parents=(x,), _backward=back)


def segment_sum(x: Tensor, starts: np.ndarray, n_rows: int) -> Tensor:
    """Sum contiguous row segments of ``x``; segment ``g`` begins at ``starts[g]``.

    ``n_rows`` is the number of segments; every segment must be non-empty.
    """
    counts = np.diff(np.append(starts, x.shape[0]))
    out = np.add.reduceat(x.data, starts, axis=0)
    assert out.shape[0] == n_rows
    return Tensor(out, _parents=(x,), _backward=lambda g: x._accum(np.repeat(g, counts, axis=0)))


def segment_softmax(logits: Tensor, starts: np.ndarray) -> Tensor:
    """Softmax within contiguous segments of a 1-D tensor."""
    alpha = kernels.segment_softmax(np.ascontiguousarray(logits.data), starts)
    counts = np.diff(np.append(starts, logits.shape[0]))

    def back(g):
        dot = np.add.reduceat(g * alpha, starts)
        logits._accum(alpha * (g - np.repeat(dot, counts)))

    return Tensor(alpha, _parents=(logits,), _backward=back)


def grad(loss_fn, params: dict[str, np.ndarray]):
    """Evaluate ``loss_fn(tensors)`` and return ``(loss, {name: d loss / d param})``.

    ``loss_fn`` receives a dict of leaf tensors with the same keys as
    ``params`` and must return a scalar :class:`Tensor`.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = loss_fn(leaves)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads
