"""Policy input assembly: internal, dynamic-obstacle and static-obstacle states.

Everything is expressed in the goal frame. Batched helpers (``*_batch``)
take a leading env axis and per-env rotations ``R`` of shape (B, 3, 3).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GoalFrame, unit_and_norm
from .voxelmap import OccupancyGrid, RayConfig, static_state

DYN_WIDTH = 9  # unit rel-pos 3, distance 1, velocity 3, (width, height) 2


@dataclass(frozen=True)
class EncoderConfig:
    n_d: int = 5
    ray: RayConfig = field(default_factory=RayConfig)

    def __post_init__(self):
        if self.n_d < 1:
            raise ValueError("n_d must be >= 1")


@dataclass
class StateBundle:
    s_int: np.ndarray  # (..., 7)
    s_dyn: np.ndarray  # (..., n_d, 9)
    s_stat: np.ndarray  # (..., n_h, n_v)

    def __getitem__(self, idx):
        return StateBundle(self.s_int[idx], self.s_dyn[idx], self.s_stat[idx])

    @staticmethod
    def stack(bundles):
        return StateBundle(np.stack([b.s_int for b in bundles]), np.stack([b.s_dyn for b in bundles]),
                           np.stack([b.s_stat for b in bundles]))


def internal_state_batch(pos, vel, goal, R):
    rel = (R @ (goal - pos)[:, :, None])[:, :, 0]
    u, d = unit_and_norm(rel)
    v = (R @ vel[:, :, None])[:, :, 0]
    return np.concatenate([u, d[:, None], v], axis=1)


def internal_state(robot_pos, robot_vel, goal, frame: GoalFrame) -> np.ndarray:
    return internal_state_batch(np.asarray(robot_pos, float)[None], np.asarray(robot_vel, float)[None],
                                np.asarray(goal, float)[None], frame.rotation[None])[0]


def dynamic_state_batch(pos, R, n_d, track_env, track_pos, track_vel, track_dims, track_ids):
    """(B, n_d, 9) from flat track arrays grouped by ``track_env``."""
    B = pos.shape[0]
    out = np.zeros((B, n_d, DYN_WIDTH))
    if len(track_env) == 0:
        return out
    rel_w = track_pos - pos[track_env]
    dist = np.linalg.norm(rel_w, axis=1)
    order = np.lexsort((track_ids, dist, track_env))
    env_sorted = track_env[order]
    first = np.searchsorted(env_sorted, env_sorted, side="left")
    rank = np.arange(len(order)) - first
    keep = rank < n_d
    rows, e, r = order[keep], env_sorted[keep], rank[keep]
    Rk = R[e]
    rel = (Rk @ rel_w[rows][:, :, None])[:, :, 0]
    u, d = unit_and_norm(rel)
    v = (Rk @ track_vel[rows][:, :, None])[:, :, 0]
    out[e, r] = np.concatenate([u, d[:, None], v, track_dims[rows]], axis=1)
    return out


def dynamic_state(robot_pos, tracks, cfg: EncoderConfig, frame: GoalFrame) -> np.ndarray:
    n = len(tracks)
    if n == 0:
        return np.zeros((cfg.n_d, DYN_WIDTH))
    tp = np.array([t.position for t in tracks])
    tv = np.array([t.velocity for t in tracks])
    td = np.array([t.dims for t in tracks])
    ti = np.array([t.id for t in tracks], np.int64)
    return dynamic_state_batch(np.asarray(robot_pos, float)[None], frame.rotation[None], cfg.n_d,
                               np.zeros(n, np.int64), tp, tv, td, ti)[0]


def encode(robot_pos, robot_vel, goal, grid: OccupancyGrid, tracks, cfg: EncoderConfig,
           frame: GoalFrame) -> StateBundle:
    return StateBundle(
        s_int=internal_state(robot_pos, robot_vel, goal, frame),
        s_dyn=dynamic_state(robot_pos, tracks, cfg, frame),
        s_stat=static_state(grid, robot_pos, cfg.ray, frame.rotation),
    )
