"""Minimal dense tensor with tape-based reverse-mode autodiff.

Backed by numpy arrays (float32 by default, float64 for high-precision
gradient checks). The operation set is exactly what the denoiser and
trainer need: elementwise arithmetic, batched matmul, softmax, layer
norm, gelu/silu, reductions and shape ops.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True

# gelu tanh approximation constants
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class NonFiniteError(ValueError):
    """Raised when a NaN/Inf value surfaces where finite math is required."""


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for sampling/eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """N-d float array that can participate in reverse-mode differentiation.

    Ops on tensors record parent links and a backward closure; calling
    ``backward()`` on a scalar result walks the recorded tape in reverse
    and accumulates ``.grad`` on every tensor with ``requires_grad``.
    Repeated backward calls without ``zero_grad`` accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{req})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        """Reverse pass from a scalar output back to all grad leaves.

        Leaf gradients accumulate across repeated calls; intermediate
        node gradients are per-pass scratch and reset each time.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        tape = Tape(self)
        for node in tape.nodes:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(tape.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Topologically ordered record of the ops reaching one output node.

    Creation order of op results is already topological (inputs exist
    before their consumers), so a depth-first post-order walk from the
    root recovers it; backward visits the nodes in exact reverse order.
    """

    def __init__(self, root):
        nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b):
    """Coerce operands; python scalars adopt the tensor operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _record(out, parents, backward):
    """Attach graph edges to ``out`` if grad is enabled and any parent needs it."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of trailing-dim broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def validate_finite(*tensors, what="tensor"):
    """Raise NonFiniteError if any value is NaN/Inf. Call once per train step."""
    for t in tensors:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _record(out, (a,), backward)


def scale(a, s):
    """Multiply by a python scalar (no gradient flows to ``s``)."""
    a = as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _record(out, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), backward)


def softmax(x, axis=-1):
    """Stable softmax: rows along ``axis`` sum to 1."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        if x.requires_grad:
            dot = np.sum(g * y, axis=axis, keepdims=True)
            x._accumulate(y * (g - dot))

    return _record(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to mean 0 / variance 1, then affine.

    Constant rows map to zeros (eps dominates the zero variance).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        if gamma.requires_grad:
            axes = tuple(range(g.ndim - gamma.data.ndim))
            gamma._accumulate(_unbroadcast((g * xhat).sum(axis=axes), gamma.data.shape))
        if beta.requires_grad:
            axes = tuple(range(g.ndim - beta.data.ndim))
            beta._accumulate(_unbroadcast(g.sum(axis=axes), beta.data.shape))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = np.mean(gx, axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            x._accumulate(inv * (gx - m1 - xhat * m2))

    return _record(out, (x, gamma, beta), backward)


def gelu(x):
    """Gaussian error linear unit, tanh approximation.

    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
    """
    x = as_tensor(x)
    d = x.data
    sq = d * d
    th = np.tanh(_GELU_C * (d + _GELU_A * sq * d))
    out = Tensor(0.5 * d * (1.0 + th))

    def backward(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * sq)
            x._accumulate(g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th * th) * du))

    return _record(out, (x,), backward)


def silu(x):
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * sig * (1.0 + x.data * (1.0 - sig)))

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    out = Tensor(x.data.sum(axis=axes))

    def backward(g):
        if x.requires_grad:
            shape = list(x.data.shape)
            for a in axes:
                shape[a] = 1
            x._accumulate(np.broadcast_to(g.reshape(shape), x.data.shape))

    return _record(out, (x,), backward)


def mean(x, axis=None):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes]))
    out = Tensor(x.data.mean(axis=axes))

    def backward(g):
        if x.requires_grad:
            shape = list(x.data.shape)
            for a in axes:
                shape[a] = 1
            x._accumulate(np.broadcast_to(g.reshape(shape), x.data.shape) / count)

    return _record(out, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _record(out, (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inv))

    return _record(out, (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _record(out, tuple(tensors), backward)


def take(x, idx):
    """Slicing/indexing; backward scatter-adds into the source."""
    x = as_tensor(x)
    out = Tensor(x.data[idx])
    basic = _is_basic_index(idx)

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            if basic:
                buf[idx] += g
            else:
                np.add.at(buf, idx, g)
            x._accumulate(buf)

    return _record(out, (x,), backward)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)
