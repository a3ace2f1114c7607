"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
checks) and record a tape when gradients are enabled. Kernels are plain
functions; each one defines its own backward rule.
"""

import contextlib

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

INV_SQRT2 = 0.7071067811865476
INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes do not conform for a kernel."""

    def __init__(self, kernel, *shapes):
        self.kernel = kernel
        self.shapes = shapes
        super().__init__(f"{kernel}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class EmptyLossError(ValueError):
    """Every position of a loss was ignored."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus an optional gradient buffer and tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor; seeds with ones for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar tensor")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t.accumulate_grad(g)
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] += pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar; scalars stay out of the graph
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{tag})"


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def parameter(data, name=None, dtype=None):
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


def _tracked(*tensors):
    return _GRAD_ENABLED and any(isinstance(t, Tensor) and (t.requires_grad or t._parents) for t in tensors)


def _make(data, parents, backward):
    out = Tensor(data)
    if _tracked(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        out = _make(a.data + b, [a], None)
        if out._parents:
            out._backward = lambda g: (g,)
        return out
    if not isinstance(a, Tensor):
        return add(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _make(data, [a, b], lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        out = _make(a.data * b, [a], None)
        if out._parents:
            out._backward = lambda g: (g * b,)
        return out
    if not isinstance(a, Tensor):
        return mul(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _make(
        data,
        [a, b],
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None
    return _make(
        data,
        [a, b],
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, [a, b], backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(np.transpose(a.data, axes), [a], lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(data, [a], lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, backward)


def tslice(a, key):
    """Basic slicing (slices, ints, steps); gradient scatters back."""
    a = as_tensor(a)
    shape = a.shape
    data = a.data[key]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _make(data, [a], backward)


def take_rows(table, ids):
    """Row lookup (embedding / gather); backward scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("take_rows", table.shape, ids.shape)
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, [table], backward)


def softmax(x, axis=-1, mask=None):
    """Masked, numerically stable softmax.

    Disallowed positions get exactly zero weight; rows with no allowed
    position come back as all zeros rather than NaNs.
    """
    x = as_tensor(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        neg = np.array(-np.inf, dtype=x.dtype)
        masked = np.where(mask, x.data, neg)
        rowmax = masked.max(axis=axis, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0)
        e = np.exp(masked - rowmax)
        s = e.sum(axis=axis, keepdims=True)
        p = e / np.where(s == 0, 1, s)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    out = _make(p, [x], backward)
    return out


def layernorm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis with affine parameters."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layernorm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        d = x.shape[-1]
        gy = g * gamma.data
        gxhat_mean = gy.mean(axis=-1, keepdims=True)
        gxhat_x_mean = (gy * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gy - gxhat_mean - xhat * gxhat_x_mean)
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        gbeta = g.sum(axis=reduce_axes) if reduce_axes else g.copy()
        return gx, ggamma, gbeta

    return _make(data, [x, gamma, beta], backward)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * np.asarray(INV_SQRT2, dtype=x.dtype)))
    data = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * np.asarray(INV_SQRT_2PI, dtype=x.dtype)
        return (g * (cdf + x.data * pdf),)

    return _make(data, [x], backward)


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        return (g / (2.0 * data),)

    return _make(data, [x], backward)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return _make(data, [x], backward)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def rope(x, positions, theta):
    """Rotary position encoding over trailing (..., L, H, D) layout.

    Consecutive dimension pairs (2i, 2i+1) rotate by pos * theta^(-2i/D);
    the backward pass is the inverse rotation.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError("rope", x.shape)
    L = x.shape[-3]
    positions = np.asarray(positions)
    if positions.shape != (L,):
        raise ShapeError("rope", x.shape, positions.shape)
    half = d // 2
    inv_freq = theta ** (-np.arange(half, dtype=x.dtype) * 2.0 / d)
    ang = positions[:, None].astype(x.dtype) * inv_freq[None, :]
    cos = np.cos(ang)[:, None, :]  # (L, 1, D/2) broadcasts over heads
    sin = np.sin(ang)[:, None, :]
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    data = np.empty_like(x.data)
    data[..., 0::2] = xe * cos - xo * sin
    data[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _make(data, [x], backward)


def cross_entropy(logits, targets, ignore_label=-100):
    """Mean -log softmax(logits)[target] over positions not equal to ignore_label."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    valid = targets != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyLossError("empty loss: every position carries the ignore label")
    v = logits.shape[1]
    if targets[valid].min() < 0 or targets[valid].max() >= v:
        raise ValueError(f"cross_entropy: target id outside [0, {v})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(z.shape[0]), np.where(valid, targets, 0)]
    losses = np.where(valid, lse - picked, 0.0)
    data = np.asarray(losses.sum() / n_valid, dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        rows = np.arange(z.shape[0])
        p[rows, np.where(valid, targets, 0)] -= 1.0
        p[~valid] = 0.0
        return (p * (g / n_valid),)

    return _make(data, [logits], backward)
