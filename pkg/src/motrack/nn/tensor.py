"""Reverse-mode autodiff on float64 numpy buffers.

Small by design: dense tensors, a closure-based tape, and exactly the
operations the tracking networks and losses need. Gradients accumulate by
summation, so one tensor can feed several consumers.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        """Populate .grad for every tensor this scalar loss depends on."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- graph node construction -------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._node(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._node(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._node(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._lift(other)

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._node(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        return Tensor._node(
            a.data ** k, (a,), lambda g: a._accum(g * k * a.data ** (k - 1))
        )

    def __matmul__(self, other):
        a, b = self, Tensor._lift(other)

        def bw(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                if a.requires_grad:
                    a._accum(g * bd)
                if b.requires_grad:
                    b._accum(g * ad)
                return
            # promote 1-D operands to matrices, mirroring numpy's matmul rules
            gm = g[..., None, :] if ad.ndim == 1 else g
            gm = gm[..., :, None] if bd.ndim == 1 else gm
            am = ad[..., None, :] if ad.ndim == 1 else ad
            bm = bd[..., :, None] if bd.ndim == 1 else bd
            if a.requires_grad:
                ga = gm @ np.swapaxes(bm, -1, -2)
                if ad.ndim == 1:
                    ga = ga[..., 0, :]
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(am, -1, -2) @ gm
                if bd.ndim == 1:
                    gb = gb[..., 0]
                b._accum(_unbroadcast(gb, b.shape))

        return Tensor._node(a.data @ b.data, (a, b), bw)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape).copy())

        return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        """Max over one axis; the gradient routes to the first argmax."""
        a = self
        idx = np.argmax(a.data, axis=axis)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
            a._accum(full)

        return Tensor._node(a.data.max(axis=axis, keepdims=keepdims), (a,), bw)

    # -- elementwise ----------------------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0

        def bw(g):
            a._accum(g * mask)

        return Tensor._node(np.where(mask, a.data, 0.0), (a,), bw)

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._node(out_data, (a,), lambda g: a._accum(g * out_data))

    def log(self):
        a = self
        return Tensor._node(np.log(a.data), (a,), lambda g: a._accum(g / a.data))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._node(out_data, (a,), lambda g: a._accum(g * 0.5 / out_data))

    def sin(self):
        a = self
        return Tensor._node(np.sin(a.data), (a,), lambda g: a._accum(g * np.cos(a.data)))

    def cos(self):
        a = self
        return Tensor._node(np.cos(a.data), (a,), lambda g: a._accum(-g * np.sin(a.data)))

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape):
        a = self
        return Tensor._node(
            a.data.reshape(*shape), (a,), lambda g: a._accum(g.reshape(a.shape))
        )

    def __getitem__(self, key):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accum(full)

        return Tensor._node(a.data[key], (a,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors along an axis."""
    parts = [Tensor._lift(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        chunks = np.split(g, offsets[1:-1], axis=axis)
        for p, chunk in zip(parts, chunks):
            if p.requires_grad:
                p._accum(chunk)

    return Tensor._node(
        np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw
    )


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack same-shaped tensors along a new axis."""
    parts = [Tensor._lift(t) for t in tensors]

    def bw(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accum(np.take(g, i, axis=axis))

    return Tensor._node(np.stack([p.data for p in parts], axis=axis), tuple(parts), bw)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Elementwise two-argument arctangent."""
    a, b = Tensor._lift(y), Tensor._lift(x)
    denom = a.data * a.data + b.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data / denom, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / denom, b.shape))

    return Tensor._node(np.arctan2(a.data, b.data), (a, b), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row cross entropy between logits (..., C) and integer labels (...)."""
    a = Tensor._lift(logits)
    labels = np.asarray(labels)
    m = a.data.max(axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]

    def bw(g):
        soft = np.exp(logp)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        a._accum((soft - onehot) * g[..., None])

    return Tensor._node(-picked, (a,), bw)


def huber(pred, target, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of (pred - target).

    Quadratic within delta of zero, linear outside; both arguments may carry
    gradients.
    """
    r = Tensor._lift(pred) - Tensor._lift(target)
    small = np.abs(r.data) <= delta

    def bw(g):
        r._accum(g * np.where(small, r.data, delta * np.sign(r.data)))

    val = np.where(
        small, 0.5 * r.data * r.data, delta * (np.abs(r.data) - 0.5 * delta)
    )
    return Tensor._node(val, (r,), bw)
