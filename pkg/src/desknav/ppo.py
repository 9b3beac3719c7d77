"""PPO over the batched navigation env."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import COLLISION, RUNNING, SUCCESS, TIMEOUT, NavEnv
from .nn import tensor as T
from .nn.beta import BetaParams, beta_entropy, beta_logprob, beta_logprob_np, beta_mean, beta_sample, scale_action
from .nn.optim import Adam
from .nn.policy import PolicyNet
from .state import StateBundle

METRIC_COLUMNS = ("update", "steps", "mean_return", "success_rate", "collision_rate", "level",
                  "policy_loss", "value_loss", "kl", "clip_frac")


class NumericError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.1
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 5e-4
    epochs: int = 4
    minibatch_size: int | None = None  # None -> B*T/8
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    horizon: int = 64
    n_envs: int = 256
    max_grad_norm: float | None = 0.5
    chunk: int = 256  # gradient-accumulation slice; does not change the math
    bootstrap_timeout: bool = True

    def __post_init__(self):
        for name in ("clip", "gamma", "gae_lambda"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.horizon < 1 or self.n_envs < 1:
            raise ValueError("epochs, horizon and n_envs must be >= 1")
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")

    @property
    def batch_size(self):
        return self.n_envs * self.horizon

    @property
    def mb_size(self):
        return self.minibatch_size or max(1, self.batch_size // 8)


@dataclass
class RolloutBuffer:
    s_int: np.ndarray  # (T, B, 7)
    s_dyn: np.ndarray
    s_stat: np.ndarray
    actions: np.ndarray  # raw x in (0,1), (T, B, 3)
    logp: np.ndarray  # (T, B)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_value: np.ndarray  # (B,)
    episodes: list = field(default_factory=list)  # (return, outcome, length)
    shield_calls: int = 0
    shield_interventions: int = 0

    @classmethod
    def empty(cls, T_, B, like: StateBundle, action_dim=3):
        z = lambda *s: np.zeros((T_, B, *s))  # noqa: E731
        return cls(z(*like.s_int.shape[1:]), z(*like.s_dyn.shape[1:]), z(*like.s_stat.shape[1:]),
                   z(action_dim), z(), z(), z(), z(), np.zeros(B))

    def __len__(self):
        return self.rewards.size

    @property
    def horizon(self):
        return self.rewards.shape[0]

    def flat_bundle(self, idx=None):
        n = len(self)
        b = StateBundle(self.s_int.reshape(n, -1), self.s_dyn.reshape(n, *self.s_dyn.shape[2:]),
                        self.s_stat.reshape(n, *self.s_stat.shape[2:]))
        return b if idx is None else b[idx]


def act(net: PolicyNet, obs: StateBundle, rng, deterministic=False):
    """Sample (or take the mean of) the Beta policy. Returns x, logp, value."""
    with T.no_grad():
        p, v = net.evaluate(obs)
    a, b = p.arrays()
    x = beta_mean(p) if deterministic else beta_sample(p, rng)
    return x, beta_logprob_np(a, b, x), net.denorm(v.data)


class EpisodeTracker:
    def __init__(self, n):
        self.ret = np.zeros(n)

    def add(self, r, done, outcome, steps):
        self.ret += r
        out = []
        for i in np.nonzero(done)[0]:
            out.append((float(self.ret[i]), int(outcome[i]), int(steps[i])))
            self.ret[i] = 0.0
        return out


def collect(env: NavEnv, net: PolicyNet, horizon: int, rng, deterministic=False, gamma=0.99,
            bootstrap_timeout=True, action_filter=None, episodes: EpisodeTracker | None = None):
    """Run ``horizon`` ticks on every env and record a rollout.

    ``action_filter(env, v_goal) -> (v_goal_filtered, intervened_mask)`` lets a
    safety layer rewrite the commanded goal-frame velocity; the stored action
    stays the policy's own sample.
    """
    obs = env.observe()
    B = env.B
    buf = RolloutBuffer.empty(horizon, B, obs)
    eps = episodes or EpisodeTracker(B)
    v_lim = env.cfg.robot.v_lim
    for t in range(horizon):
        x, logp, value = act(net, obs, rng, deterministic)
        buf.s_int[t], buf.s_dyn[t], buf.s_stat[t] = obs.s_int, obs.s_dyn, obs.s_stat
        buf.actions[t], buf.logp[t], buf.values[t] = x, logp, value
        v_goal = scale_action(x, v_lim)
        if action_filter is not None:
            v_goal, hit = action_filter(env, v_goal)
            buf.shield_calls += B
            buf.shield_interventions += int(np.sum(hit))
        world = (v_goal[:, None, :] @ env.R)[:, 0]
        nxt, rew, info = env.step(world)
        done = info.outcome != RUNNING
        buf.episodes.extend(eps.add(rew, done, info.outcome, info.steps))
        rew = rew.copy()
        if bootstrap_timeout:
            trunc = np.nonzero(info.outcome == TIMEOUT)[0]
            if len(trunc):
                _, _, v_end = act(net, nxt[trunc], rng, deterministic=True)
                rew[trunc] += gamma * v_end
        buf.rewards[t], buf.dones[t] = rew, done
        obs = env.reset_done() if np.any(done) else nxt
    _, _, buf.last_value[:] = act(net, obs, rng, deterministic=True)
    return buf


def gae(rewards, values, dones, last_value, gamma, lam):
    """Generalized advantage estimates over (T, B) arrays."""
    rewards = np.asarray(rewards, float)
    values, dones = np.asarray(values, float), np.asarray(dones, float)
    T_ = rewards.shape[0]
    adv = np.zeros_like(rewards)
    nxt_adv = np.zeros_like(rewards[0])
    nxt_val = np.asarray(last_value, float)
    for t in range(T_ - 1, -1, -1):
        nd = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt_val * nd - values[t]
        nxt_adv = delta + gamma * lam * nd * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv, adv + values


def normalize(adv):
    adv = np.asarray(adv, float)
    if adv.size < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-12)


def ppo_loss(net: PolicyNet, bundle, actions, old_logp, adv, ret_norm_target, cfg: PpoConfig, scale=1.0):
    """Build the combined loss on one slice. Returns (loss Tensor, stats dict)."""
    p, v = net.evaluate(bundle)
    logp = beta_logprob(p, actions)
    ratio = T.exp(logp - old_logp)
    surr = T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv))
    pol = -T.mean(surr)
    vloss = T.mean(T.square(v - ret_norm_target))
    ent = T.mean(beta_entropy(p))
    loss = pol + cfg.value_coef * vloss - cfg.entropy_coef * ent
    r = ratio.data
    stats = {"policy_loss": float(pol.data), "value_loss_n": float(vloss.data), "entropy": float(ent.data),
             "kl": float(np.mean(r - 1.0 - np.log(r))), "clip_frac": float(np.mean(np.abs(r - 1.0) > cfg.clip))}
    return T.mul(loss, scale), stats


def update(net: PolicyNet, opt: Adam, buf: RolloutBuffer, cfg: PpoConfig, rng):
    """Clipped-surrogate epochs over the buffer. Returns mean statistics."""
    adv, ret = gae(buf.rewards, buf.values, buf.dones, buf.last_value, cfg.gamma, cfg.gae_lambda)
    adv = normalize(adv).ravel()
    ret = ret.ravel()
    net.ret_norm.update(ret)
    target = (ret - net.ret_norm.mean) / net.ret_norm.std
    n = len(buf)
    actions = buf.actions.reshape(n, -1)
    old_logp = buf.logp.ravel()
    bundle = buf.flat_bundle()
    mb = min(cfg.mb_size, n)
    acc = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n - mb + 1, mb):
            idx = perm[s:s + mb]
            opt.zero_grad()
            for c in range(0, mb, cfg.chunk):
                j = idx[c:c + cfg.chunk]
                loss, st = ppo_loss(net, bundle[j], actions[j], old_logp[j], adv[j], target[j], cfg,
                                    scale=len(j) / mb)
                if not np.isfinite(loss.data):
                    raise NumericError("non-finite loss", {"stats": st, "update_slice": int(s)})
                loss.backward()
                for k, val in st.items():
                    acc[k] = acc.get(k, 0.0) + val * len(j) / mb
            gn = opt.grad_norm()
            if not math.isfinite(gn):
                raise NumericError("non-finite gradient", {"grad_norm": gn})
            opt.step()
            count += 1
    rep = {k: v / max(count, 1) for k, v in acc.items()}
    rep["value_loss"] = rep.pop("value_loss_n") * net.ret_norm.std ** 2
    rep["n_minibatches"] = count
    return rep


def combined_loss(net, buf: RolloutBuffer, cfg: PpoConfig, adv=None, target=None):
    """Loss on a whole buffer with frozen advantages/targets (used for descent checks)."""
    n = len(buf)
    with T.no_grad():
        loss, _ = ppo_loss(net, buf.flat_bundle(), buf.actions.reshape(n, -1), buf.logp.ravel(), adv, target, cfg)
    return float(loss.data)


# ------------------------------------------------------------------ training loop

def summarize(episodes):
    if not episodes:
        return float("nan"), float("nan"), float("nan")
    ret = np.array([e[0] for e in episodes])
    out = np.array([e[1] for e in episodes])
    return float(ret.mean()), float(np.mean(out == SUCCESS)), float(np.mean(out == COLLISION))


def format_row(row):
    out = []
    for k in METRIC_COLUMNS:
        v = row[k]
        out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
    return out


class Trainer:
    """Collect/update cycles with metrics CSV and checkpoints."""

    def __init__(self, env: NavEnv, net: PolicyNet, cfg: PpoConfig, seed=0, deterministic=False,
                 action_filter=None):
        self.env, self.net, self.cfg = env, net, cfg
        self.opt = Adam(net.parameters(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
        self.rng = np.random.default_rng([seed, 0x5EED])
        self.deterministic = deterministic
        self.action_filter = action_filter
        self.update_idx = 0
        self.steps = 0
        self.episodes = EpisodeTracker(env.B)
        self.started = False
        self.last_episodes = []

    def step(self):
        if not self.started:
            self.env.reset_all()
            self.started = True
        buf = collect(self.env, self.net, self.cfg.horizon, self.rng, self.deterministic, self.cfg.gamma,
                      self.cfg.bootstrap_timeout, self.action_filter, self.episodes)
        rep = update(self.net, self.opt, buf, self.cfg, self.rng)
        self.update_idx += 1
        self.steps += len(buf)
        mean_ret, succ, coll = summarize(buf.episodes)
        row = {"update": self.update_idx, "steps": self.steps, "mean_return": mean_ret, "success_rate": succ,
               "collision_rate": coll, "level": self.env.curriculum.level, **rep}
        row["n_episodes"] = len(buf.episodes)
        self.last_episodes = buf.episodes
        return row

    def run(self, out_dir, max_updates=None, max_steps=None, max_seconds=None, checkpoint_every=10,
            on_row=None, meta=None):
        from .nn.checkpoint import save_checkpoint
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        new = not csv_path.exists() or self.update_idx == 0
        t0 = time.monotonic()
        best = -1.0
        rows = []
        with open(csv_path, "w" if new else "a", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if new:
                w.writerow(METRIC_COLUMNS)
            while True:
                if max_updates is not None and self.update_idx >= max_updates:
                    break
                if max_steps is not None and self.steps >= max_steps:
                    break
                if max_seconds is not None and time.monotonic() - t0 >= max_seconds:
                    break
                try:
                    row = self.step()
                except NumericError:
                    save_checkpoint(out / "diagnostics.ckpt", self.net, self.opt, self.meta(meta))
                    raise
                w.writerow(format_row(row))
                f.flush()
                rows.append(row)
                if on_row is not None:
                    on_row(row)
                if row["n_episodes"] and row["success_rate"] > best:
                    best = row["success_rate"]
                    save_checkpoint(out / "best.ckpt", self.net, self.opt, self.meta(meta))
                if checkpoint_every and self.update_idx % checkpoint_every == 0:
                    save_checkpoint(out / "last.ckpt", self.net, self.opt, self.meta(meta))
        save_checkpoint(out / "last.ckpt", self.net, self.opt, self.meta(meta))
        return rows

    def meta(self, extra=None):
        m = {"update": self.update_idx, "steps": self.steps, "level": self.env.curriculum.level}
        if extra:
            m.update(extra)
        return m

    def restore(self, header):
        m = header.get("meta", {})
        self.update_idx = int(m.get("update", 0))
        self.steps = int(m.get("steps", 0))
        lvl = int(m.get("level", 0))
        self.env.curriculum.level = min(lvl, self.env.curriculum.max_level)
