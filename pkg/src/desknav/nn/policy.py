"""Actor-critic network: static/dynamic extractors, separate actor and critic trunks."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .beta import BetaParams
from .layers import MLP, ConvStack, DenseStack, Module


@dataclass(frozen=True)
class PolicyConfig:
    n_h: int = 36
    n_v: int = 5
    n_d: int = 5
    dyn_width: int = 9
    int_width: int = 7
    extractor: str = "conv"  # or "dense"
    channels: tuple = (8, 16, 32)
    static_strides: tuple = ((2, 1), (2, 2), (2, 2))
    dynamic_strides: tuple = ((1, 1), (1, 2), (1, 1))
    static_dim: int = 128
    dynamic_dim: int = 64
    hidden: tuple = (128, 128)
    # fixed input scaling so every feature is O(1)
    stat_scale: float = 1.0 / 4.1
    int_scale: tuple = (1.0, 1.0, 1.0, 0.1, 0.5, 0.5, 0.5)
    dyn_scale: tuple = (1.0, 1.0, 1.0, 0.2, 0.5, 0.5, 0.5, 1.0, 0.5)
    action_dim: int = 3

    def __post_init__(self):
        if self.extractor not in ("conv", "dense"):
            raise ValueError(f"extractor must be 'conv' or 'dense', got {self.extractor!r}")
        if len(self.int_scale) != self.int_width or len(self.dyn_scale) != self.dyn_width:
            raise ValueError("scale vectors must match feature widths")


class ReturnNormalizer:
    """Running mean/variance of value targets (Chan parallel update)."""

    def __init__(self):
        self.mean, self.var, self.count = 0.0, 1.0, 1e-4

    def update(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        bm, bv, bn = x.mean(), x.var(), x.size
        tot = self.count + bn
        d = bm - self.mean
        self.mean += d * bn / tot
        self.var = (self.var * self.count + bv * bn + d * d * self.count * bn / tot) / tot
        self.count = tot

    @property
    def std(self):
        return float(np.sqrt(max(self.var, 1e-8)))

    def state(self):
        return {"mean": self.mean, "var": self.var, "count": self.count}

    def load(self, d):
        self.mean, self.var, self.count = float(d["mean"]), float(d["var"]), float(d["count"])


class PolicyNet(Module):
    def __init__(self, cfg: PolicyConfig = PolicyConfig(), seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        if cfg.extractor == "conv":
            pads = ((1, 1),) * 3
            self.static = ConvStack((cfg.n_h, cfg.n_v), cfg.channels, cfg.static_strides, pads,
                                    cfg.static_dim, rng, wrap_h=True)
            # keep rows (obstacles) padded, columns (features) unpadded
            self.dynamic = ConvStack((cfg.n_d, cfg.dyn_width), cfg.channels, cfg.dynamic_strides,
                                     ((1, 0),) * 3, cfg.dynamic_dim, rng)
        else:
            self.static = DenseStack((cfg.n_h, cfg.n_v), 256, cfg.static_dim, rng)
            self.dynamic = DenseStack((cfg.n_d, cfg.dyn_width), 128, cfg.dynamic_dim, rng)
        n_feat = cfg.static_dim + cfg.dynamic_dim + cfg.int_width
        self.actor = MLP((n_feat, *cfg.hidden, 2 * cfg.action_dim), rng, out_gain=0.01)
        self.critic = MLP((n_feat, *cfg.hidden, 1), rng, out_gain=1.0)
        self.ret_norm = ReturnNormalizer()
        self._int_scale = np.asarray(cfg.int_scale)
        self._dyn_scale = np.asarray(cfg.dyn_scale)

    def _check(self, bundle):
        c = self.cfg
        n = bundle.s_int.shape[0]
        want = {"s_int": (n, c.int_width), "s_dyn": (n, c.n_d, c.dyn_width), "s_stat": (n, c.n_h, c.n_v)}
        for k, shp in want.items():
            got = getattr(bundle, k).shape
            if got != shp:
                raise ValueError(f"{k} shape mismatch: expected {shp}, got {got}")

    def features(self, bundle):
        self._check(bundle)
        s_stat = T.Tensor(bundle.s_stat * self.cfg.stat_scale)
        s_dyn = T.Tensor(bundle.s_dyn * self._dyn_scale)
        s_int = T.Tensor(bundle.s_int * self._int_scale)
        return T.concat([self.static(s_stat), self.dynamic(s_dyn), s_int], axis=-1)

    def evaluate(self, bundle):
        """-> (BetaParams of Tensors, normalized value Tensor (N,))."""
        f = self.features(bundle)
        out = self.actor(f)
        k = self.cfg.action_dim
        alpha = T.softplus(out[:, :k]) + 1.0
        beta = T.softplus(out[:, k:]) + 1.0
        v = T.reshape(self.critic(f), (f.shape[0],))
        return BetaParams(alpha, beta), v

    def denorm(self, v):
        return v * self.ret_norm.std + self.ret_norm.mean

    def forward(self, bundle):
        p, v = self.evaluate(bundle)
        return p, self.denorm(v.data)

    # flat parameter view, used by checkpoints and tests
    def flat_params(self):
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat_params(self, flat):
        i = 0
        for p in self.parameters():
            n = p.data.size
            p.data[...] = flat[i:i + n].reshape(p.shape)
            i += n
        if i != flat.size:
            raise ValueError(f"parameter vector has {flat.size} values, network needs {i}")

    def n_params(self):
        return int(sum(p.data.size for p in self.parameters()))

    def arch_dict(self):
        d = asdict(self.cfg)
        d["shapes"] = [list(p.shape) for p in self.parameters()]
        return d

    def arch_hash(self):
        blob = json.dumps(self.arch_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:32]


def forward(net: PolicyNet, bundle):
    """(BetaParams, value ndarray (N,))."""
    return net.forward(bundle)


def policy_config_from_dict(d):
    d = dict(d)
    d.pop("shapes", None)
    for k in ("channels", "static_strides", "dynamic_strides", "hidden", "int_scale", "dyn_scale"):
        if k in d:
            d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in d[k])
    return PolicyConfig(**d)
