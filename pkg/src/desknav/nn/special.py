"""Log-gamma (Lanczos, g=7, n=9), digamma and trigamma for positive reals."""
from __future__ import annotations

import numpy as np

_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lgamma_pos(x):
    # valid for x >= 0.5
    z = x - 1.0
    a = np.full_like(z, _LANCZOS[0])
    for k in range(1, 9):
        a = a + _LANCZOS[k] / (z + k)
    t = z + _G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(a)


def lgamma(x):
    """log|Gamma(x)|; reflection formula below 0.5."""
    x = np.asarray(x, dtype=np.float64)
    small = x < 0.5
    if not np.any(small):
        return _lgamma_pos(x)
    out = np.empty_like(x)
    out[~small] = _lgamma_pos(x[~small])
    xs = x[small]
    out[small] = np.log(np.pi / np.abs(np.sin(np.pi * xs))) - _lgamma_pos(1.0 - xs)
    return out


def digamma(x):
    """psi(x) for x > 0: upward recurrence to x >= 10, then the asymptotic series."""
    x = np.array(x, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    for _ in range(10):
        low = x < 10.0
        if not np.any(low):
            break
        acc = acc - np.where(low, 1.0 / np.where(low, x, 1.0), 0.0)
        x = np.where(low, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1 / 12 - inv2 * (1 / 120 - inv2 * (1 / 252 - inv2 * (1 / 240 - inv2 * (1 / 132)))))
    return acc + np.log(x) - 0.5 * inv - series


def trigamma(x):
    """psi'(x) for x > 0, same recurrence scheme."""
    x = np.array(x, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    for _ in range(10):
        low = x < 10.0
        if not np.any(low):
            break
        acc = acc + np.where(low, 1.0 / np.where(low, x, 1.0) ** 2, 0.0)
        x = np.where(low, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (1 + inv * (0.5 + inv * (1 / 6 - inv2 * (1 / 30 - inv2 * (1 / 42 - inv2 * (1 / 30))))))
    return acc + series
