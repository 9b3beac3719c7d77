"""Velocity-obstacle safety filter.

Obstacles are spheres (center, inflated radius, velocity). The set of
relative velocities that reach an obstacle within ``tau`` seconds is a cone
truncated by a ball; it is convex, so the tangent plane at the nearest
boundary point separates it from a safe velocity. The filter projects the
policy velocity onto the intersection of those halfspaces and the box limits.

All vectors share one frame (the goal frame in practice). Positions passed to
``safe_action`` are relative to the robot unless ``robot_pos`` is given.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

EXIT_EPS = 1e-6  # push exit points strictly outside the closed VO
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class ShieldConfig:
    tau: float = 2.0
    margin: float = 0.1
    k_static: int = 15
    refine_rounds: int = 2

    def __post_init__(self):
        if self.tau <= 0 or self.margin < 0 or self.k_static < 0:
            raise ValueError("tau > 0, margin >= 0 and k_static >= 0 required")


@dataclass(frozen=True)
class ObstacleSphere:
    center: np.ndarray
    radius: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")


@dataclass(frozen=True)
class VoRegion:
    disc_center: np.ndarray  # p_rel / tau
    disc_radius: float  # R / tau
    axis: np.ndarray
    half_angle: float
    tau: float


@dataclass
class HalfspaceConstraint:
    point: np.ndarray  # absolute velocity on the plane
    normal: np.ndarray
    obstacle: int
    kind: str  # "vo" or "penetration"

    def residual(self, v):
        n = self.normal / np.linalg.norm(self.normal)
        return float((np.asarray(v) - self.point) @ n)


@dataclass
class ShieldReport:
    status: str  # "pass", "projected", "infeasible-relaxed"
    constraints: list
    active: list
    relaxation: float = 0.0
    rounds: int = 0

    @property
    def intervened(self):
        return self.status != "pass"

    @property
    def feasible(self):
        return self.status != "infeasible-relaxed"


# ------------------------------------------------------------- geometry

def vo_region(p_rel, radius, tau) -> VoRegion:
    p = np.asarray(p_rel, float)
    d = float(np.linalg.norm(p))
    if d <= radius:
        raise ValueError("VO undefined for penetrating obstacles")
    return VoRegion(p / tau, radius / tau, p / d, math.asin(radius / d), tau)


def in_vo(v_rel, p_rel, radius, tau) -> bool:
    """True iff |p_rel - v_rel t| <= radius for some t in (0, tau]."""
    v = np.asarray(v_rel, float)
    p = np.asarray(p_rel, float)
    c = p @ p - radius * radius
    if c <= 0:
        return True
    pv = p @ v
    vv = v @ v
    if pv <= 0 or vv == 0:
        return False
    disc = pv * pv - vv * c
    if disc < 0:
        return False
    t1 = c / (pv + math.sqrt(disc))
    return t1 <= tau


def in_vo_batch(v_rel, p_rel, radius, tau):
    v = np.asarray(v_rel, float)
    p = np.asarray(p_rel, float)
    c = np.einsum("...i,...i", p, p) - np.asarray(radius) ** 2
    pv = np.einsum("...i,...i", p, v)
    vv = np.einsum("...i,...i", v, v)
    disc = pv * pv - vv * c
    ok = (pv > 0) & (vv > 0) & (disc >= 0)
    t1 = np.where(ok, c / np.where(ok, pv + np.sqrt(np.maximum(disc, 0)), 1.0), np.inf)
    return (c <= 0) | (ok & (t1 <= tau))


def _lateral(axis):
    """Positive-azimuth direction around ``axis``; used to break the on-axis tie."""
    e = np.cross([0.0, 0.0, 1.0], axis)
    n = np.linalg.norm(e)
    if n < 1e-9:
        return np.array([0.0, 1.0, 0.0])
    return e / n


def exit_vector(v_rel, p_rel, radius, tau, eps=EXIT_EPS):
    """Smallest change ``u`` with ``v_rel + u`` outside the truncated VO (by ``eps``)."""
    v = np.asarray(v_rel, float)
    reg = vo_region(p_rel, radius, tau)
    a_hat, th = reg.axis, reg.half_angle
    c, r = reg.disc_center, reg.disc_radius
    cn = np.linalg.norm(c)
    cos_t, sin_t = math.cos(th), math.sin(th)

    ax = v @ a_hat
    radial = v - ax * a_hat
    rho = np.linalg.norm(radial)
    e_hat = radial / rho if rho > 1e-12 else _lateral(a_hat)

    cands = []
    # cone leg, beyond the tangent circle
    g = cos_t * a_hat + sin_t * e_hat
    s = max(v @ g, cn * cos_t)
    q = s * g
    n_out = -sin_t * a_hat + cos_t * e_hat
    cands.append((np.linalg.norm(q - v), q, n_out))
    # spherical cap facing the apex
    w = v - c
    wn = np.linalg.norm(w)
    u = w / wn if wn > 1e-12 else -a_hat
    q = c + r * u
    if q @ a_hat <= cn * cos_t * cos_t + 1e-12:
        cands.append((np.linalg.norm(q - v), q, u))
    dist, q, n_out = min(cands, key=lambda t: t[0])
    d = q - v
    dn = np.linalg.norm(d)
    n_hat = d / dn if dn > 1e-9 else n_out
    return d + eps * n_hat


def penetration_exit(v_rel, p_rel, radius, dt):
    """(delta_v, normal, required separation speed) for an overlapping obstacle."""
    p = np.asarray(p_rel, float)
    d = float(np.linalg.norm(p))
    n_hat = -p / d if d > 1e-12 else np.array([1.0, 0.0, 0.0])
    need = (radius - d) / dt
    gap = need - float(np.asarray(v_rel, float) @ n_hat)
    return max(0.0, gap) * n_hat, n_hat, need


# ------------------------------------------------------------- obstacle spheres

def static_spheres(robot_pos, s_stat, ray_dirs, resolution, robot_radius, cfg: ShieldConfig = ShieldConfig(),
                   miss_value=None):
    """One zero-velocity sphere per hit ray, K nearest kept.

    ``ray_dirs`` (n_h, n_v, 3) must be in the same frame as ``robot_pos``.
    """
    lengths = np.asarray(s_stat, float).reshape(-1)
    dirs = np.asarray(ray_dirs, float).reshape(-1, 3)
    miss = lengths.max() + 1 if miss_value is None else miss_value
    hit = np.nonzero(lengths < miss - 1e-9)[0]
    if len(hit) == 0 or cfg.k_static == 0:
        return []
    order = hit[np.argsort(lengths[hit], kind="stable")][:cfg.k_static]
    rad = resolution / 2 + robot_radius + cfg.margin
    base = np.asarray(robot_pos, float)
    return [ObstacleSphere(base + lengths[i] * dirs[i], rad, np.zeros(3)) for i in order]


def dynamic_spheres(centers, velocities, dims, robot_radius, cfg: ShieldConfig = ShieldConfig()):
    """Stack ceil(h/w) spheres along each cylinder (center at mid-height)."""
    out = []
    for c, v, (w, h) in zip(np.asarray(centers, float).reshape(-1, 3), np.asarray(velocities, float).reshape(-1, 3),
                            np.asarray(dims, float).reshape(-1, 2)):
        n = max(1, math.ceil(h / max(w, 1e-6)))
        seg = h / n
        rad = math.hypot(w / 2, seg / 2) + robot_radius + cfg.margin
        base = c[2] - h / 2
        for k in range(n):
            out.append(ObstacleSphere(np.array([c[0], c[1], base + (k + 0.5) * seg]), rad, v.copy()))
    return out


# ------------------------------------------------------------- projection QP

def solve_projection(target, A, b, tol=FEAS_TOL):
    """min |x - target|^2 s.t. A x >= b (rows of A unit length), 3 variables.

    Exact active-set enumeration over subsets of size <= 3. Returns
    (x, active indices) or (None, None) if no KKT point exists (infeasible).
    """
    target = np.asarray(target, float)
    A = np.asarray(A, float).reshape(-1, 3)
    b = np.asarray(b, float)
    m = len(b)
    if m == 0 or np.all(A @ target >= b - tol):
        return target.copy(), []
    best = None
    for k in (1, 2, 3):
        if k > m:
            break
        combos = np.array(list(itertools.combinations(range(m), k)))
        As = A[combos]  # (C, k, 3)
        G = As @ As.transpose(0, 2, 1)
        rhs = b[combos] - As @ target
        det = np.linalg.det(G)
        ok = np.abs(det) > 1e-10
        if not np.any(ok):
            continue
        lam = np.linalg.solve(G[ok], rhs[ok][..., None])[..., 0]
        x = target + np.einsum("cki,ck->ci", As[ok], lam)
        good = np.all(lam >= -1e-12, axis=1) & np.all(x @ A.T >= b - tol, axis=1)
        if np.any(good):
            xs = x[good]
            j = int(np.argmin(np.sum((xs - target) ** 2, axis=1)))
            best = (xs[j], [int(i) for i in combos[ok][good][j]])
            break
    return best if best is not None else (None, None)


def _box_rows(v_min, v_max):
    eye = np.eye(3)
    return np.vstack([eye, -eye]), np.concatenate([np.asarray(v_min, float), -np.asarray(v_max, float)])


def _least_infeasible(target, A, b, v_min, v_max):
    """Smallest uniform relaxation s of A x >= b - s within the box, then project."""
    m = len(b)
    c = np.zeros(4)
    c[3] = 1.0
    A_ub = np.hstack([-A, -np.ones((m, 1))])
    bounds = [(lo, hi) for lo, hi in zip(v_min, v_max)] + [(0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=-b, bounds=bounds, method="highs")
    s = float(res.x[3]) if res.success else float(np.max(b - A @ np.clip(target, v_min, v_max)))
    Ab, bb = _box_rows(v_min, v_max)
    A2 = np.vstack([A, Ab])
    b2 = np.concatenate([b - s - 1e-9, bb])
    x, active = solve_projection(target, A2, b2)
    if x is None:
        x = res.x[:3] if res.success else np.clip(target, v_min, v_max)
        active = []
    return x, active, s


def constraints_for(v, obstacles, tau, dt, robot_pos=None, start_index=0):
    """Halfspaces for every obstacle whose VO contains ``v``."""
    out = []
    base = np.zeros(3) if robot_pos is None else np.asarray(robot_pos, float)
    for i, ob in enumerate(obstacles):
        p_rel = np.asarray(ob.center, float) - base
        vo = np.asarray(ob.velocity, float)
        v_rel = v - vo
        if np.linalg.norm(p_rel) <= ob.radius:
            dv, n_hat, need = penetration_exit(v_rel, p_rel, ob.radius, dt)
            if v_rel @ n_hat < need:
                out.append(HalfspaceConstraint(vo + need * n_hat, n_hat, start_index + i, "penetration"))
        elif in_vo(v_rel, p_rel, ob.radius, tau):
            dv = exit_vector(v_rel, p_rel, ob.radius, tau)
            out.append(HalfspaceConstraint(v + dv, dv, start_index + i, "vo"))
    return out


def safe_action(v_rl, obstacles, v_min, v_max, tau=2.0, dt=0.1, robot_pos=None, refine_rounds=2):
    """Project the policy velocity out of every violated VO. Returns (v_safe, report)."""
    v_rl = np.asarray(v_rl, float)
    v_min = np.broadcast_to(np.asarray(v_min, float), (3,))
    v_max = np.broadcast_to(np.asarray(v_max, float), (3,))
    if np.any(v_min >= v_max):
        raise ValueError("v_min must be < v_max componentwise")
    cons = constraints_for(v_rl, obstacles, tau, dt, robot_pos)
    if not cons:
        return v_rl.copy(), ShieldReport("pass", [], [])
    Ab, bb = _box_rows(v_min, v_max)
    x = v_rl
    rounds = 0
    while True:
        N = np.array([c.normal / np.linalg.norm(c.normal) for c in cons])
        rhs = np.array([n @ c.point for n, c in zip(N, cons)])
        A = np.vstack([N, Ab])
        b = np.concatenate([rhs, bb])
        x, active = solve_projection(v_rl, A, b)
        if x is None:
            x, active, s = _least_infeasible(v_rl, N, rhs, v_min, v_max)
            return np.clip(x, v_min, v_max), ShieldReport("infeasible-relaxed", cons, active, relaxation=s, rounds=rounds)
        if rounds >= refine_rounds:
            break
        seen = {c.obstacle for c in cons}
        extra = [c for c in constraints_for(x, obstacles, tau, dt, robot_pos) if c.obstacle not in seen]
        if not extra:
            break
        cons = cons + extra
        rounds += 1
    # the active-set tolerance can leave x a hair outside the box; limits are hard
    return np.clip(x, v_min, v_max), ShieldReport("projected", cons, active, rounds=rounds)


# ------------------------------------------------------------- env adapter

class EnvShield:
    """Per-env filter for goal-frame velocity commands of a NavEnv batch."""

    def __init__(self, cfg: ShieldConfig = ShieldConfig()):
        self.cfg = cfg
        self.last_reports = {}

    def obstacles(self, env, i):
        R = env.R[i]
        ray = env.cfg.encoder.ray
        obs = static_spheres(np.zeros(3), env._s_stat[i], ray.directions(), env.cfg.resolution,
                             env.cfg.robot.radius, self.cfg, miss_value=ray.miss_value)
        t = env.tracker
        m = t.env == i
        if np.any(m):
            rel = (t.X[m, :3] - env.pos[i]) @ R.T
            vel = t.X[m, 3:6] @ R.T
            obs += dynamic_spheres(rel, vel, t.dims[m], env.cfg.robot.radius, self.cfg)
        return obs

    def __call__(self, env, v_goal):
        out = np.array(v_goal, float)
        hit = np.zeros(env.B, bool)
        lim = env.cfg.robot.v_lim
        self.last_reports = {}
        for i in range(env.B):
            if env.outcome[i] != 0:
                continue
            obs = self.obstacles(env, i)
            if not obs:
                continue
            v, rep = safe_action(out[i], obs, -lim, lim, self.cfg.tau, env.cfg.robot.dt,
                                 refine_rounds=self.cfg.refine_rounds)
            out[i] = v
            hit[i] = rep.intervened
            self.last_reports[i] = rep
        return out, hit
