"""Tiny reverse-mode autodiff over numpy arrays.

Only the primitives the model needs are provided. Every op records a
closure on the output tensor; :func:`backward` walks the graph in reverse
topological order and accumulates gradients into ``Tensor.grad``.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64 if like is None else like.dtype))


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(root: Tensor, grad=None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable tensor."""
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    order, seen = [], set()
    stack = [(root, False)]
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
    grads = {id(root): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(0.5 * x * (1.0 + th), (a,), bw)


def stop_grad(a):
    """Forward identity; nothing flows back into ``a``."""
    return Tensor(a.data)


# ------------------------------------------------------------------ structure


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)




def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# -------------------------------------------------------------------- linear


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold the batch axes into one gemm
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: x shape {x.shape} incompatible with w shape {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match w shape {w.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------------- normalisation


def softmax(x, axis=-1):
    if not np.all(np.isfinite(x.data) | (x.data == -np.inf)):
        raise NumericError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


LN_EPS = 1e-5


def layer_norm(x, gamma, beta, eps=LN_EPS):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# ----------------------------------------------------------------- attention


def causal_mask(t, dtype=np.float64):
    """Additive mask: 0 on and below the diagonal, -inf above."""
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = -np.inf
    return m


def causal_mhsa(x, p, n_heads):
    """Masked multi-head self-attention over ``x[..., T, D]``.

    ``p`` maps ``wq wk wv wo`` (D x D) and ``bq bk bv bo`` (D,) to tensors.
    """
    t, d = x.shape[-2], x.shape[-1]
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"width {d} is not divisible by n_heads={n_heads}")
    if t < 1:
        raise ShapeError("causal_mhsa needs at least one position")
    dh = d // n_heads
    lead = x.shape[:-2]

    def heads(w, b):
        y = linear(x, w, b).reshape(*lead, t, n_heads, dh)
        return swapaxes(y, -3, -2)  # [..., H, T, dh]

    q = heads(p["wq"], p["bq"])
    k = heads(p["wk"], p["bk"])
    v = heads(p["wv"], p["bv"])
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    att = softmax(add(scores, Tensor(causal_mask(t, x.dtype))), axis=-1)
    out = swapaxes(matmul(att, v), -3, -2).reshape(*lead, t, d)
    return linear(out, p["wo"], p["bo"])


# -------------------------------------------------------------- similarities


def neg_l2_scores(a, b):
    """``out[..., k] = -||b[k] - a[...]||`` (Euclidean norm, not squared).

    At zero distance the gradient is taken as zero.
    """
    if b.ndim != 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"neg_l2_scores: shapes {a.shape} and {b.shape} do not align")
    diff = a.data[..., None, :] - b.data  # [..., K, D]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)

    def bw(g):
        contrib = g[..., None] * unit  # d(-dist)/d(a) = -unit
        ga = -contrib.sum(axis=-2)
        gb = contrib.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _make(-dist, (a, b), bw)


# -------------------------------------------------------------------- losses


def cross_entropy_smoothed(logits, target, epsilon=0.0):
    """Mean cross-entropy of ``logits[..., K]`` against label-smoothed targets.

    ``target`` is an int or int array matching ``logits.shape[:-1]``; the
    smoothed target is ``(1-eps)*onehot + eps/K``.
    """
    k = logits.shape[-1]
    tgt = np.broadcast_to(np.asarray(target), logits.shape[:-1])
    if not np.issubdtype(tgt.dtype, np.integer):
        raise IndexError(f"target must be integer class indices, got {tgt.dtype}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= k):
        raise IndexError(f"target class out of range [0, {k})")
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"label smoothing must be in [0, 1), got {epsilon}")
    q = np.full(logits.shape, epsilon / k, dtype=logits.dtype)
    np.put_along_axis(q, tgt[..., None], 1.0 - epsilon + epsilon / k, axis=-1)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = max(tgt.size, 1)
    loss = -(q * logp).sum() / n

    def bw(g):
        return (g * (np.exp(logp) - q) / n,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def mse(a, b):
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    return tmean(square(a - b))
