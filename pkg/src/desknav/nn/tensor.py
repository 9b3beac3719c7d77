"""A small define-by-run reverse-mode autodiff over numpy arrays.

Only the operations the actor-critic needs are provided. Every op records
its parents and a closure that maps the output gradient to parent gradients.
"""
from __future__ import annotations

import numba as nb
import numpy as np

from . import special


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that was not recorded by any parameter")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # intermediate; free memory

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: ops inside record nothing."""

    def __enter__(self):
        self.prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self.prev


def _make(data, parents, backward):
    req = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * a.data / b.data**2, b.shape))
    return _make(a.data / b.data, (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b):
    """x (N, I) @ w (I, O) + b (O,) in one node."""
    x = as_tensor(x)

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        _acc(b, g.sum(axis=0))
    return _make(x.data @ w.data + b.data, (x, w, b), bw)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape).copy())
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / n)


def _unary(a, f, df):
    a = as_tensor(a)
    out = f(a.data)

    def bw(g):
        _acc(a, g * df(a.data, out))
    return _make(out, (a,), bw)


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def softplus(a):
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: 0.5 * (1.0 + np.tanh(0.5 * x)))


def square(a):
    return _unary(a, np.square, lambda x, y: 2.0 * x)


def lgamma(a):
    return _unary(a, special.lgamma, lambda x, y: special.digamma(x))


def digamma(a):
    return _unary(a, special.digamma, lambda x, y: special.trigamma(x))


def clip(a, lo, hi):
    """Clamp; gradient passes only where the input is strictly inside."""
    return _unary(a, lambda x: np.clip(x, lo, hi), lambda x, y: ((x > lo) & (x < hi)).astype(np.float64))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        _acc(a, _unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        _acc(b, _unbroadcast(np.where(pick_a, 0.0, g), b.shape))
    return _make(np.minimum(a.data, b.data), (a, b), bw)


def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        _acc(a, g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), bw)


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if not isinstance(idx, (slice, tuple)) else full.__setitem__(idx, g)
        _acc(a, full)
    return _make(a.data[idx], (a,), bw)


def concat(ts, axis=-1):
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            _acc(t, part)
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def pad2d(a, ph, pw, wrap_h=False):
    """Pad (N, H, W, C) by ``ph`` rows and ``pw`` columns each side.

    With ``wrap_h`` the row axis is padded periodically (azimuth rings).
    """
    a = as_tensor(a)
    x = a.data
    if wrap_h and ph:
        x = np.concatenate([x[:, -ph:], x, x[:, :ph]], axis=1)
        x = np.pad(x, ((0, 0), (0, 0), (pw, pw), (0, 0)))
    else:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    H, W = a.shape[1], a.shape[2]

    def bw(g):
        g = g[:, :, pw:pw + W]
        inner = g[:, ph:ph + H].copy()
        if wrap_h and ph:
            inner[:, -ph:] += g[:, :ph]
            inner[:, :ph] += g[:, ph + H:]
        _acc(a, inner)
    return _make(x, (a,), bw)


def conv2d(x, w, b, stride=(1, 1)):
    """Valid 2-D convolution, channels-last.

    x (N, H, W, C), w (O, C, kh, kw), b (O,) -> (N, Ho, Wo, O).
    """
    x = as_tensor(x)
    N, H, W, C = x.shape
    O, C2, kh, kw = w.shape
    if C != C2:
        raise ValueError(f"conv input has {C} channels, kernel expects {C2}")
    sh, sw = stride
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    xd = np.ascontiguousarray(x.data)
    cols = _im2col(xd, kh, kw, sh, sw, Ho, Wo).reshape(N * Ho * Wo, kh * kw * C)
    wm = w.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = (cols @ wm.T + b.data).reshape(N, Ho, Wo, O)

    def bw(g):
        g2 = g.reshape(N * Ho * Wo, O)
        _acc(w, (g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
        _acc(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(N, Ho, Wo, kh, kw, C)
            _acc(x, _col2im(dcols, H, W, sh, sw))
    return _make(out, (x, w, b), bw)


@nb.njit(cache=True)
def _im2col(x, kh, kw, sh, sw, Ho, Wo):
    N, H, W, C = x.shape
    out = np.empty((N, Ho, Wo, kh, kw, C))
    for n in range(N):
        for a in range(Ho):
            for b in range(Wo):
                for i in range(kh):
                    for j in range(kw):
                        for c in range(C):
                            out[n, a, b, i, j, c] = x[n, a * sh + i, b * sw + j, c]
    return out


@nb.njit(cache=True)
def _col2im(d, H, W, sh, sw):
    N, Ho, Wo, kh, kw, C = d.shape
    out = np.zeros((N, H, W, C))
    for n in range(N):
        for a in range(Ho):
            for b in range(Wo):
                for i in range(kh):
                    for j in range(kw):
                        for c in range(C):
                            out[n, a * sh + i, b * sw + j, c] += d[n, a, b, i, j, c]
    return out
