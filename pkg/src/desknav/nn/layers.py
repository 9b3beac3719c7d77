"""Parameterized layers on top of the tensor ops."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def orthogonal(rng, n_in, n_out, gain=1.0):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


class Module:
    def parameters(self):
        out = []
        for v in self.__dict__.values():
            if isinstance(v, Tensor) and v.requires_grad:
                out.append(v)
            elif isinstance(v, Module):
                out.extend(v.parameters())
            elif isinstance(v, (list, tuple)):
                for m in v:
                    if isinstance(m, Module):
                        out.extend(m.parameters())
        return out

    def __call__(self, x):
        return self.forward(x)


class Dense(Module):
    def __init__(self, n_in, n_out, rng, gain=np.sqrt(2.0)):
        self.w = Tensor(orthogonal(rng, n_in, n_out, gain), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def forward(self, x):
        if x.shape[-1] != self.w.shape[0]:
            raise ValueError(f"dense expects {self.w.shape[0]} features, got {x.shape[-1]}")
        return T.linear(x, self.w, self.b)


class Conv2d(Module):
    """3x3-style conv with explicit padding; layout (N, H, W, C)."""

    def __init__(self, c_in, c_out, rng, kernel=(3, 3), stride=(1, 1), pad=(1, 1), wrap_h=False):
        kh, kw = kernel
        fan_in = c_in * kh * kw
        self.w = Tensor(rng.standard_normal((c_out, c_in, kh, kw)) * np.sqrt(2.0 / fan_in), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = tuple(stride)
        self.pad = tuple(pad)
        self.wrap_h = wrap_h

    def out_hw(self, h, w):
        kh, kw = self.w.shape[2:]
        return ((h + 2 * self.pad[0] - kh) // self.stride[0] + 1,
                (w + 2 * self.pad[1] - kw) // self.stride[1] + 1)

    def forward(self, x):
        if any(self.pad):
            x = T.pad2d(x, self.pad[0], self.pad[1], wrap_h=self.wrap_h)
        return T.conv2d(x, self.w, self.b, self.stride)


class ConvStack(Module):
    """Conv layers with ReLU, flattened, then a dense projection with ReLU."""

    def __init__(self, in_hw, channels, strides, pads, out_dim, rng, wrap_h=False):
        self.in_hw = tuple(in_hw)
        self.convs = []
        h, w = in_hw
        c = 1
        for ch, st, pd in zip(channels, strides, pads):
            conv = Conv2d(c, ch, rng, stride=st, pad=pd, wrap_h=wrap_h)
            h, w = conv.out_hw(h, w)
            if h < 1 or w < 1:
                raise ValueError(f"conv stack collapses input {in_hw}")
            self.convs.append(conv)
            c = ch
        self.flat = h * w * c
        self.proj = Dense(self.flat, out_dim, rng)

    def forward(self, x):
        n = x.shape[0]
        h = T.reshape(x, (n, *self.in_hw, 1))
        for conv in self.convs:
            h = T.relu(conv(h))
        return T.relu(self.proj(T.reshape(h, (n, self.flat))))


class DenseStack(Module):
    """Flatten + two dense layers; the cheap stand-in for ConvStack."""

    def __init__(self, in_hw, hidden, out_dim, rng):
        self.n_in = int(np.prod(in_hw))
        self.l1 = Dense(self.n_in, hidden, rng)
        self.l2 = Dense(hidden, out_dim, rng)

    def forward(self, x):
        h = T.reshape(x, (x.shape[0], self.n_in))
        return T.relu(self.l2(T.relu(self.l1(h))))


class MLP(Module):
    def __init__(self, sizes, rng, out_gain=1.0):
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes[:-2], sizes[1:-1])]
        self.head = Dense(sizes[-2], sizes[-1], rng, gain=out_gain)

    def forward(self, x):
        for l in self.layers:
            x = T.tanh(l(x))
        return self.head(x)
