"""Dense float64 tensor with reverse-mode automatic differentiation.

The graph is a dynamic tape: every op returns a fresh Tensor holding its
inputs and a backward closure. Calling backward() on a scalar walks the
tape in reverse topological order and accumulates gradients into every
reachable Tensor that has requires_grad set. Values are never mutated by
forward ops; the only sanctioned in-place write is an optimizer updating
parameter .values between training steps.
"""

from __future__ import annotations

import numpy as np

NEG_BIG = -1e9  # attention-blocking sentinel; finite so fully-blocked rows stay NaN-free


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.values.shape:
                self.grad = np.broadcast_to(self.grad, self.values.shape).copy()
        else:
            self.grad += g

    def backward(self):
        """Populate .grad on every requires_grad ancestor of this scalar."""
        if self.values.ndim != 0 and self.values.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.values.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.values))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # elementwise arithmetic (numpy broadcasting for add/mul family)

    def __add__(self, other):
        other = _as_tensor(other)
        out = _make(self.values + other.values, (self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.values.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.values.shape))
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.values, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _make(self.values * other.values, (self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.values, self.values.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.values, other.values.shape))
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = _make(self.values / other.values, (self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.values, self.values.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-g * self.values / other.values ** 2,
                                                   other.values.shape))
            out._backward = bw
        return out

    # ------------------------------------------------------------------
    # structural ops

    def matmul(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        a, b = self.values, other.values
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
        out = _make(a @ b, (self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(g @ b.T)
                if other.requires_grad:
                    other._accumulate(a.T @ g)
            out._backward = bw
        return out

    __matmul__ = matmul

    def transpose(self) -> "Tensor":
        out = _make(self.values.T, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.T)
        return out

    @property
    def T(self):
        return self.transpose()

    def reshape(self, *shape) -> "Tensor":
        old = self.values.shape
        out = _make(self.values.reshape(*shape), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(old))
        return out

    def take_rows(self, idx) -> "Tensor":
        idx = np.asarray(idx, dtype=np.intp)
        out = _make(self.values[idx], (self,))
        if out.requires_grad:
            def bw(g):
                acc = np.zeros_like(self.values)
                np.add.at(acc, idx, g)
                self._accumulate(acc)
            out._backward = bw
        return out

    def gather_cols(self, idx) -> "Tensor":
        """out[i] = self[i, idx[i]] for a 2-D tensor."""
        idx = np.asarray(idx, dtype=np.intp)
        rows = np.arange(self.values.shape[0])
        out = _make(self.values[rows, idx], (self,))
        if out.requires_grad:
            def bw(g):
                acc = np.zeros_like(self.values)
                np.add.at(acc, (rows, idx), g)
                self._accumulate(acc)
            out._backward = bw
        return out

    # ------------------------------------------------------------------
    # nonlinearities and reductions

    def relu(self) -> "Tensor":
        out = _make(np.maximum(self.values, 0.0), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * (self.values > 0.0))
        return out

    def sigmoid(self) -> "Tensor":
        y = _sigmoid(self.values)
        out = _make(y, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * y * (1.0 - y))
        return out

    def exp(self) -> "Tensor":
        y = np.exp(self.values)
        out = _make(y, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * y)
        return out

    def log(self) -> "Tensor":
        out = _make(np.log(self.values), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g / self.values)
        return out

    def sum(self) -> "Tensor":
        out = _make(self.values.sum(), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(np.full_like(self.values, float(g)))
        return out

    def mean(self) -> "Tensor":
        n = self.values.size
        out = _make(self.values.mean(), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(np.full_like(self.values, float(g) / n))
        return out

    def sum_lastdim(self) -> "Tensor":
        out = _make(self.values.sum(axis=-1), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(
                np.broadcast_to(np.expand_dims(g, -1), self.values.shape).copy())
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(values, parents) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _sigmoid(x):
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    v = x.values
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (x,))
    if out.requires_grad:
        def bw(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - dot))
        out._backward = bw
    return out


def logsumexp_lastdim(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis; gradient is the softmax."""
    v = x.values
    m = v.max(axis=-1, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=-1, keepdims=True)
    out = _make((np.log(s) + m).squeeze(-1), (x,))
    if out.requires_grad:
        def bw(g):
            x._accumulate(np.expand_dims(g, -1) * (e / s))
        out._backward = bw
    return out


def layernorm_lastdim(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to mean 0, variance 1 (no affine)."""
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (v - mu) * inv
    out = _make(y, (x,))
    if out.requires_grad:
        def bw(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (g - gm - y * gy))
        out._backward = bw
    return out


def masked_fill(x: Tensor, block, fill: float) -> Tensor:
    """Replace entries where `block` is true with `fill`; gradient flows only elsewhere."""
    block = np.asarray(block, dtype=bool)
    if block.shape != x.values.shape:
        raise ValueError(f"masked_fill shape mismatch: values {x.values.shape} vs block {block.shape}")
    out = _make(np.where(block, fill, x.values), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(np.where(block, 0.0, g))
    return out


def bce_with_logits(x: Tensor, target) -> Tensor:
    """Elementwise sigmoid cross-entropy against a constant target in [0,1].

    Computed as max(x,0) - x*t + log1p(exp(-|x|)) for stability at large |x|.
    """
    t = np.asarray(target, dtype=np.float64)
    v = x.values
    loss = np.maximum(v, 0.0) - v * t + np.log1p(np.exp(-np.abs(v)))
    out = _make(loss, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * (_sigmoid(v) - t))
    return out


def concat_rows(tensors) -> Tensor:
    """Concatenate 2-D tensors along axis 0."""
    tensors = list(tensors)
    vals = np.concatenate([t.values for t in tensors], axis=0)
    out = _make(vals, tuple(tensors))
    if out.requires_grad:
        sizes = [t.values.shape[0] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bw(g):
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t._accumulate(g[a:b])
        out._backward = bw
    return out
