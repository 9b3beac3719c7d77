"""Beta action head: log-density, entropy, sampling and scaling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .special import lgamma as _lgamma_np

X_EPS = 1e-6


@dataclass
class BetaParams:
    alpha: object  # Tensor or ndarray, (..., 3)
    beta: object

    def arrays(self):
        a = self.alpha.data if isinstance(self.alpha, T.Tensor) else np.asarray(self.alpha, float)
        b = self.beta.data if isinstance(self.beta, T.Tensor) else np.asarray(self.beta, float)
        return a, b


def clamp_unit(x):
    """Clamp into [eps, 1-eps]; returns (x, flagged) where flagged marks altered rows."""
    x = np.asarray(x, dtype=np.float64)
    xc = np.clip(x, X_EPS, 1.0 - X_EPS)
    return xc, np.any(xc != x, axis=-1)


def log_beta_fn(a, b):
    return T.lgamma(a) + T.lgamma(b) - T.lgamma(T.add(a, b))


def beta_logprob(p: BetaParams, x, return_flag=False):
    """Summed log-density over the last axis. ``x`` may be a Tensor (for gradient checks)."""
    a, b = T.as_tensor(p.alpha), T.as_tensor(p.beta)
    if isinstance(x, T.Tensor):
        xt, flag = x, np.zeros(x.shape[:-1], bool)
    else:
        xc, flag = clamp_unit(x)
        xt = T.Tensor(xc)
    lp = (T.mul(a - 1.0, T.log(xt)) + T.mul(b - 1.0, T.log(1.0 - xt)) - log_beta_fn(a, b))
    out = T.sum(lp, axis=-1)
    return (out, flag) if return_flag else out


def beta_entropy(p: BetaParams):
    a, b = T.as_tensor(p.alpha), T.as_tensor(p.beta)
    s = T.add(a, b)
    ent = (log_beta_fn(a, b) - T.mul(a - 1.0, T.digamma(a)) - T.mul(b - 1.0, T.digamma(b))
           + T.mul(s - 2.0, T.digamma(s)))
    return T.sum(ent, axis=-1)


def beta_logprob_np(alpha, beta, x):
    xc, _ = clamp_unit(x)
    lb = _lgamma_np(alpha) + _lgamma_np(beta) - _lgamma_np(alpha + beta)
    return np.sum((alpha - 1) * np.log(xc) + (beta - 1) * np.log1p(-xc) - lb, axis=-1)


def beta_sample(p: BetaParams, rng: np.random.Generator):
    a, b = p.arrays()
    ga = rng.gamma(a)
    gb = rng.gamma(b)
    x = ga / (ga + gb)
    return np.clip(x, X_EPS, 1.0 - X_EPS)


def beta_mean(p: BetaParams):
    a, b = p.arrays()
    return a / (a + b)


def scale_action(x, v_lim):
    return v_lim * (2.0 * np.asarray(x, dtype=np.float64) - 1.0)
