"""Vector helpers and the goal coordinate frame.

Vectors are plain ``np.ndarray`` of shape (3,) (or (..., 3) for batches),
float64 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORLD_Z = np.array([0.0, 0.0, 1.0])
WORLD_Y = np.array([0.0, 1.0, 0.0])


def vec3(x, y=None, z=None) -> np.ndarray:
    if y is None:
        v = np.asarray(x, dtype=np.float64).reshape(3)
    else:
        v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


def norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.dot(v, v)))


def unit_and_norm(v: np.ndarray, eps: float = 1e-6):
    """Split ``v`` (..., 3) into a unit direction and its length.

    Vectors shorter than ``eps`` get a zero direction.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n < eps, 1.0, n)
    u = np.where(n < eps, 0.0, v / safe)
    return u, n[..., 0]


@dataclass(frozen=True)
class GoalFrame:
    """World to goal-frame transform.

    ``rotation`` rows are the goal-frame axes expressed in world coordinates,
    so ``rotation @ v_world`` gives goal-frame components.
    """

    origin: np.ndarray
    rotation: np.ndarray

    def to_goal(self, v, is_position: bool = True) -> np.ndarray:
        return to_goal_frame(self, v, is_position)

    def to_world(self, v, is_position: bool = True) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        out = v @ self.rotation
        if is_position:
            out = out + self.origin
        return out


def make_goal_frame(start, goal) -> GoalFrame:
    start = vec3(start)
    goal = vec3(goal)
    d = goal - start
    n = norm(d)
    if n <= 1e-6:
        raise ValueError("zero-length goal vector")
    x = d / n
    y = np.cross(WORLD_Z, x)
    ny = norm(y)
    if ny < 1e-6:
        # goal straight above/below the start: no ground-parallel y from the cross product
        y = WORLD_Y.copy()
    else:
        y = y / ny
    z = np.cross(x, y)
    z /= norm(z)
    if ny < 1e-6:
        # re-orthogonalise; x is +-z_world here so y stays world y exactly
        y = np.cross(z, x)
    return GoalFrame(origin=start, rotation=np.stack([x, y, z]))


def to_goal_frame(frame: GoalFrame, v, is_position: bool = True) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if is_position:
        v = v - frame.origin
    return v @ frame.rotation.T


def batch_rotations(starts: np.ndarray, goals: np.ndarray) -> np.ndarray:
    """Rotation matrices (B, 3, 3) for many start/goal pairs at once."""
    d = goals - starts
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n <= 1e-6):
        raise ValueError("zero-length goal vector")
    x = d / n
    y = np.cross(WORLD_Z, x)
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    degenerate = ny[:, 0] < 1e-6
    y = np.where(degenerate[:, None], WORLD_Y, y / np.where(ny < 1e-6, 1.0, ny))
    z = np.cross(x, y)
    z /= np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(degenerate):
        y[degenerate] = np.cross(z[degenerate], x[degenerate])
    return np.stack([x, y, z], axis=1)


@dataclass(frozen=True)
class AABB:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))
