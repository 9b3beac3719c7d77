"""Per-step reward terms and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import unit_and_norm

MIN_OBSTACLE_DIST = 1e-3


@dataclass(frozen=True)
class RewardWeights:
    vel: float = 1.0
    static: float = 0.2
    dynamic: float = 0.2
    smooth: float = 0.1
    height: float = 0.5

    def __post_init__(self):
        if min(self.as_array()) < 0:
            raise ValueError("reward weights must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.vel, self.static, self.dynamic, self.smooth, self.height])


def reward_terms_batch(pos, vel, prev_vel, goal, start, s_stat, track_env=None, track_pos=None,
                       height_tol: float = 0.1) -> np.ndarray:
    """Return (B, 5) columns (r_vel, r_ss, r_ds, r_smooth, r_height)."""
    B = pos.shape[0]
    u, _ = unit_and_norm(goal - pos)
    r_vel = np.einsum("bi,bi->b", u, vel)
    r_ss = np.log(np.maximum(s_stat.reshape(B, -1), MIN_OBSTACLE_DIST)).mean(axis=1)
    r_ds = np.zeros(B)
    if track_env is not None and len(track_env):
        d = np.maximum(np.linalg.norm(track_pos - pos[track_env], axis=1), MIN_OBSTACLE_DIST)
        total = np.bincount(track_env, weights=np.log(d), minlength=B)
        count = np.bincount(track_env, minlength=B)
        r_ds = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    r_smooth = -np.linalg.norm(vel - prev_vel, axis=1)
    z, zs, zg = pos[:, 2], start[:, 2], goal[:, 2]
    lo = np.minimum(zs, zg) - height_tol
    hi = np.maximum(zs, zg) + height_tol
    off = np.minimum(np.abs(z - zs), np.abs(z - zg)) ** 2
    r_height = np.where((z < lo) | (z > hi), -off, 0.0)
    return np.stack([r_vel, r_ss, r_ds, r_smooth, r_height], axis=1)


def reward_terms(robot_pos, robot_vel, prev_vel, goal, start, s_stat, track_positions=(),
                 height_tol: float = 0.1):
    tp = np.asarray(track_positions, dtype=float).reshape(-1, 3)
    te = np.zeros(len(tp), np.int64)
    out = reward_terms_batch(*(np.asarray(a, float)[None] for a in (robot_pos, robot_vel, prev_vel,
                                                                      goal, start, s_stat)),
                             track_env=te, track_pos=tp, height_tol=height_tol)
    return tuple(float(x) for x in out[0])


def total_reward(terms, w: RewardWeights):
    return np.asarray(terms, dtype=float) @ w.as_array()
