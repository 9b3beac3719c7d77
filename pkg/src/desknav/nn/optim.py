from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in self.params if p.grad is not None)))

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        scale = 1.0
        if self.max_grad_norm is not None:
            gn = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if gn > self.max_grad_norm:
                scale = self.max_grad_norm / (gn + 1e-12)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()


def adam_step(params, grads, lr, betas=(0.9, 0.999), eps=1e-8, m=None, v=None, t=0):
    """Functional form on plain arrays; returns (params, m, v, t)."""
    b1, b2 = betas
    m = [np.zeros_like(p) for p in params] if m is None else m
    v = [np.zeros_like(p) for p in params] if v is None else v
    t += 1
    out, m2, v2 = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = b1 * mi + (1 - b1) * g
        vi = b2 * vi + (1 - b2) * g * g
        out.append(p - lr * (mi / (1 - b1**t)) / (np.sqrt(vi / (1 - b2**t)) + eps))
        m2.append(mi)
        v2.append(vi)
    return out, m2, v2, t
