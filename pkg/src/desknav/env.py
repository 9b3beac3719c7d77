"""Vectorised kinematic navigation environment with moving walkers.

The robot is a velocity-controlled point mass (sphere). Static obstacles are
rasterised into one fixed-size occupancy grid per env; dynamic obstacles are
vertical cylinders standing on the ground that move at constant speed and
reflect off the world walls. Dynamic obstacles are observed through noisy
centre detections fed to the tracker, exactly as a perception stack would.
"""
from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import batch_rotations
from .reward import RewardWeights, reward_terms_batch
from .state import EncoderConfig, StateBundle, dynamic_state_batch, internal_state_batch
from .tracker import TrackerBank, TrackerConfig
from .voxelmap import OccupancyGrid, sphere_collides_batch, static_state_batch

RUNNING, SUCCESS, COLLISION, TIMEOUT = 0, 1, 2, 3
OUTCOME_NAMES = {RUNNING: "running", SUCCESS: "success", COLLISION: "collision", TIMEOUT: "timeout"}

REFERENCE_AREA = 50.0 * 50.0


def scaled_count(n_ref: int, extent) -> int:
    """Area-proportional obstacle count relative to a 50 m x 50 m world."""
    return int(round(n_ref * extent[0] * extent[1] / REFERENCE_AREA))


class WorldTooDense(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    extent: tuple = (20.0, 20.0, 5.0)
    n_static: int = 56
    static_radius: tuple = (0.2, 0.5)
    box_fraction: float = 0.2
    n_dynamic: int = 10
    dynamic_speed: tuple = (0.5, 1.5)
    dynamic_width: tuple = (0.4, 0.8)
    dynamic_height: tuple = (2.0, 3.0)
    start_height: tuple = (1.0, 2.0)
    min_goal_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("extent must be positive")
        if self.n_static < 0 or self.n_dynamic < 0:
            raise ValueError("obstacle counts must be >= 0")
        for name in ("static_radius", "dynamic_speed", "dynamic_width", "dynamic_height", "start_height"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"invalid range {name}={lo, hi}")


@dataclass
class World:
    spec: WorldSpec
    grid: OccupancyGrid
    statics: list  # (kind, params) tuples for replay/plotting
    dyn_pos: np.ndarray  # (n, 3): x, y of the axis and z = 0 (base)
    dyn_vel: np.ndarray  # (n, 3), vz = 0
    dyn_dims: np.ndarray  # (n, 2): width (diameter), height
    start: np.ndarray
    goal: np.ndarray


@dataclass
class RobotConfig:
    radius: float = 0.3
    v_lim: float = 2.0
    a_max: float = 4.0
    dt: float = 0.1
    goal_tol: float = 0.5
    timeout: int = 300


@dataclass
class EnvConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    robot: RobotConfig = field(default_factory=RobotConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    resolution: float = 0.25
    detect_range: float = 6.0
    detect_noise: float = 0.05
    dynamic_schedule: tuple = (10, 13, 16, 19)
    success_window: int = 100
    success_threshold: float = 0.8
    terminate_on_collision: bool = True
    collision_debounce: float = 1.0


# ------------------------------------------------------------ curriculum

@dataclass
class CurriculumState:
    schedule: tuple = (10, 13, 16, 19)
    level: int = 0
    window_size: int = 100
    threshold: float = 0.8
    window: deque = None

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.window is None:
            self.window = deque(maxlen=self.window_size)

    @property
    def n_dynamic(self) -> int:
        return self.schedule[self.level]

    @property
    def max_level(self) -> int:
        return len(self.schedule) - 1

    def success_rate(self) -> float:
        return float(np.mean(self.window)) if self.window else 0.0


def curriculum_update(cur: CurriculumState, outcome: int) -> CurriculumState:
    """Record a terminal outcome; level up when the full window's success rate
    strictly exceeds the threshold."""
    if outcome == RUNNING:
        raise ValueError("curriculum only accepts terminal outcomes")
    cur.window.append(1.0 if outcome == SUCCESS else 0.0)
    if (len(cur.window) == cur.window_size and cur.success_rate() > cur.threshold
            and cur.level < cur.max_level):
        cur.level += 1
        cur.window.clear()
    return cur


# ------------------------------------------------------------ generation

def _free(grid: OccupancyGrid, p, clearance) -> bool:
    from .voxelmap import sphere_collides
    return not sphere_collides(grid, p, clearance)


def spawn_scenario(spec: WorldSpec, rng: np.random.Generator, grid: OccupancyGrid | None = None,
                   resolution: float = 0.25, robot_radius: float = 0.3, max_tries: int = 1000) -> World:
    """Generate a world. Writes into ``grid`` in place when one is given."""
    ex, ey, ez = spec.extent
    if grid is None:
        dims = tuple(int(math.ceil(e / resolution)) for e in spec.extent)
        grid = OccupancyGrid(resolution=resolution, dims=dims)
    else:
        grid.clear()
    statics = []
    for _ in range(spec.n_static):
        x, y = rng.uniform(0.0, ex), rng.uniform(0.0, ey)
        r = rng.uniform(*spec.static_radius)
        if rng.random() < spec.box_fraction:
            hx, hy = r, rng.uniform(*spec.static_radius)
            from .geometry import AABB
            grid.fill_box(AABB(np.array([x - hx, y - hy, 0.0]), np.array([x + hx, y + hy, ez])))
            statics.append(("box", (x, y, hx, hy)))
        else:
            grid.fill_cylinder((x, y), r, 0.0, ez)
            statics.append(("cylinder", (x, y, r)))

    n = spec.n_dynamic
    heading = rng.uniform(0.0, 2 * np.pi, n)
    speed = rng.uniform(*spec.dynamic_speed, n)
    dims = np.stack([rng.uniform(*spec.dynamic_width, n), rng.uniform(*spec.dynamic_height, n)], axis=1)
    pos = np.stack([rng.uniform(dims[:, 0] / 2, ex - dims[:, 0] / 2),
                    rng.uniform(dims[:, 0] / 2, ey - dims[:, 0] / 2), np.zeros(n)], axis=1)
    vel = np.stack([speed * np.cos(heading), speed * np.sin(heading), np.zeros(n)], axis=1)

    margin = 1.0
    min_dist = spec.min_goal_fraction * min(ex, ey)
    clearance = robot_radius + 0.3

    def sample_point():
        return np.array([rng.uniform(margin, ex - margin), rng.uniform(margin, ey - margin),
                         rng.uniform(*spec.start_height)])

    def clear_of_walkers(p):
        if n == 0:
            return True
        dh = np.linalg.norm(pos[:, :2] - p[:2], axis=1) - dims[:, 0] / 2
        return bool(np.all(dh > clearance + 1.0))

    for _ in range(max_tries):
        start, goal = sample_point(), sample_point()
        if np.linalg.norm(goal - start) < min_dist:
            continue
        if _free(grid, start, clearance) and _free(grid, goal, clearance) and clear_of_walkers(start):
            return World(spec, grid, statics, pos, vel, dims, start, goal)
    raise WorldTooDense("world too dense")


def world_seed(base_seed: int, env_index: int, episode: int) -> int:
    ss = np.random.SeedSequence([base_seed, env_index, episode])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# ------------------------------------------------------------ batch env

@dataclass
class StepInfo:
    collided: np.ndarray
    out_of_bounds: np.ndarray
    nan_action: np.ndarray
    contacts: np.ndarray  # debounced contact events this tick
    terms: np.ndarray  # (B, 5) raw reward terms
    outcome: np.ndarray
    steps: np.ndarray


class NavEnv:
    """A batch of ``n_envs`` independent navigation episodes."""

    def __init__(self, cfg: EnvConfig, n_envs: int, seed: int = 0, workers: int = 1):
        self.cfg = cfg
        self.B = n_envs
        self.seed = seed
        self.workers = max(1, int(workers))
        w = cfg.world
        dims = tuple(int(math.ceil(e / cfg.resolution)) for e in w.extent)
        self._like = OccupancyGrid(resolution=cfg.resolution, dims=dims)
        nvox = dims[0] * dims[1] * dims[2]
        self.log_odds = np.zeros((n_envs, nvox))
        self.grids = [OccupancyGrid(resolution=cfg.resolution, dims=dims, log_odds=self.log_odds[i])
                      for i in range(n_envs)]
        self.grid_id = np.arange(n_envs, dtype=np.int64)
        self.curriculum = CurriculumState(schedule=tuple(cfg.dynamic_schedule), window_size=cfg.success_window,
                                          threshold=cfg.success_threshold)
        self.max_dyn = max(max(cfg.dynamic_schedule), w.n_dynamic)
        B, M = n_envs, self.max_dyn
        self.pos = np.zeros((B, 3))
        self.vel = np.zeros((B, 3))
        self.prev_vel = np.zeros((B, 3))
        self.start = np.zeros((B, 3))
        self.goal = np.zeros((B, 3))
        self.R = np.tile(np.eye(3), (B, 1, 1))
        self.dyn_pos = np.zeros((B, M, 3))
        self.dyn_vel = np.zeros((B, M, 3))
        self.dyn_dims = np.ones((B, M, 2))
        self.dyn_mask = np.zeros((B, M), bool)
        self.outcome = np.zeros(B, np.int64)
        self.steps = np.zeros(B, np.int64)
        self.episode = np.zeros(B, np.int64)
        self.world_seeds = np.zeros(B, np.int64)
        self.n_dynamic = np.zeros(B, np.int64)
        self.contacts = np.zeros(B, np.int64)
        self.last_contact = np.full(B, -10**9, np.int64)
        self.noise_rngs = [None] * B
        self.statics = [None] * B
        self.tracker = TrackerBank(B, cfg.tracker)
        self.ray_dirs = cfg.encoder.ray.directions().reshape(-1, 3)
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    # -- spawning --

    def spawn(self, i: int, wseed: int, n_dynamic: int | None = None):
        """(Re)generate env ``i`` from an explicit world seed."""
        n_dyn = self.curriculum.n_dynamic if n_dynamic is None else n_dynamic
        spec = _replace(self.cfg.world, n_dynamic=n_dyn, seed=wseed)
        rng = np.random.default_rng(wseed)
        world = spawn_scenario(spec, rng, self.grids[i], self.cfg.resolution, self.cfg.robot.radius)
        self.noise_rngs[i] = np.random.default_rng([wseed, 1])
        self.world_seeds[i] = wseed
        self.n_dynamic[i] = n_dyn
        self.statics[i] = world.statics
        self.pos[i] = world.start
        self.vel[i] = 0.0
        self.prev_vel[i] = 0.0
        self.start[i] = world.start
        self.goal[i] = world.goal
        self.R[i] = batch_rotations(world.start[None], world.goal[None])[0]
        self.dyn_mask[i] = False
        self.dyn_mask[i, :n_dyn] = True
        self.dyn_pos[i, :n_dyn] = world.dyn_pos
        self.dyn_vel[i, :n_dyn] = world.dyn_vel
        self.dyn_dims[i, :n_dyn] = world.dyn_dims
        self.dyn_pos[i, n_dyn:] = 0.0
        self.dyn_vel[i, n_dyn:] = 0.0
        self.outcome[i] = RUNNING
        self.steps[i] = 0
        self.contacts[i] = 0
        self.last_contact[i] = -10**9
        self.tracker.reset_envs([i])

    def reset_all(self) -> StateBundle:
        for i in range(self.B):
            self.spawn(i, world_seed(self.seed, i, int(self.episode[i])))
        self._observe_tracks(np.arange(self.B))
        self._s_stat = self.static_rays()
        return self.observe(self._s_stat)

    def reset_worlds(self, wseeds, n_dynamic=None) -> StateBundle:
        """Spawn env i from ``wseeds[i]`` (bench and replay)."""
        if len(wseeds) != self.B:
            raise ValueError(f"need {self.B} world seeds, got {len(wseeds)}")
        for i, s in enumerate(wseeds):
            self.spawn(i, int(s), n_dynamic)
        self._observe_tracks(np.arange(self.B))
        self._s_stat = self.static_rays()
        return self.observe(self._s_stat)

    def reset_done(self) -> StateBundle:
        """Respawn terminal envs at the current curriculum level."""
        done = np.nonzero(self.outcome != RUNNING)[0]
        for i in done:
            curriculum_update(self.curriculum, int(self.outcome[i]))
        for i in done:
            self.episode[i] += 1
            self.spawn(i, world_seed(self.seed, int(i), int(self.episode[i])))
        if len(done):
            self._observe_tracks(done)
            self._s_stat[done] = self.static_rays(done)
        return self.observe(self._s_stat)

    # -- perception --

    def _detections(self, envs):
        cfg = self.cfg
        envs = np.asarray(envs, np.int64)
        M = self.max_dyn
        # one noise draw per env and slot keeps every env's stream independent of the batch
        noise = np.stack([self.noise_rngs[i].normal(0.0, cfg.detect_noise, (M, 3)) for i in envs]) \
            if len(envs) else np.zeros((0, M, 3))
        c = self.dyn_pos[envs].copy()
        d = self.dyn_dims[envs]
        c[..., 2] = d[..., 1] / 2
        near = self.dyn_mask[envs] & (np.linalg.norm(c - self.pos[envs, None], axis=-1) <= cfg.detect_range)
        ei, si = np.nonzero(near)
        dims = d[ei, si]
        # point statistics are synthesised from the box size
        aux = np.stack([400.0 * dims[:, 0] * dims[:, 1], 0.25 * np.hypot(dims[:, 0], dims[:, 1])], axis=1)
        return envs[ei], c[ei, si] + noise[ei, si], dims, aux.reshape(-1, 2)

    def _observe_tracks(self, envs):
        """Feed one detection frame for freshly spawned envs."""
        e, c, d, a = self._detections(envs)
        bank = self.tracker
        # only spawn tracks; nothing to predict for these envs
        sub = TrackerBank(self.B, bank.cfg)
        sub.step(self.cfg.robot.dt, e, c, d, a)
        keep = ~np.isin(bank.env, envs)
        for name in ("X", "P", "dims", "aux", "env", "ids", "age", "missed"):
            setattr(bank, name, np.concatenate([getattr(bank, name)[keep], getattr(sub, name)]))
        bank.next_id[envs] = sub.next_id[envs]
        order = np.lexsort((bank.ids, bank.env))
        bank._keep(order)

    def static_rays(self, envs=None) -> np.ndarray:
        """Ray-length rows (n, n_h * n_v) for ``envs`` (default: all)."""
        envs = np.arange(self.B) if envs is None else np.asarray(envs, np.int64)
        world_dirs = self.ray_dirs @ self.R[envs]
        ray = self.cfg.encoder.ray
        if self._pool is None or len(envs) < 2 * self.workers:
            return static_state_batch(self.log_odds, self.grid_id[envs], self._like, self.pos[envs],
                                      world_dirs, ray)
        chunks = np.array_split(np.arange(len(envs)), self.workers)
        parts = self._pool.map(lambda c: static_state_batch(self.log_odds, self.grid_id[envs[c]], self._like,
                                                            self.pos[envs[c]], world_dirs[c], ray), chunks)
        return np.concatenate(list(parts))

    def observe(self, s_stat=None) -> StateBundle:
        enc = self.cfg.encoder
        if s_stat is None:
            s_stat = self._s_stat
        t = self.tracker
        return StateBundle(
            s_int=internal_state_batch(self.pos, self.vel, self.goal, self.R),
            s_dyn=dynamic_state_batch(self.pos, self.R, enc.n_d, t.env, t.X[:, :3], t.X[:, 3:6], t.dims, t.ids),
            s_stat=s_stat.reshape(self.B, enc.ray.n_h, enc.ray.n_v),
        )

    # -- dynamics --

    def step(self, actions):
        """Advance every env one tick with world-frame velocity commands (B, 3).

        Terminal envs are frozen until :meth:`reset_done`.
        """
        cfg, rc = self.cfg, self.cfg.robot
        actions = np.array(actions, dtype=np.float64).reshape(self.B, 3)
        nan_action = ~np.all(np.isfinite(actions), axis=1)
        actions[nan_action] = 0.0
        active = self.outcome == RUNNING

        # commanded speed is capped, then approached under the acceleration limit
        speed = np.linalg.norm(actions, axis=1, keepdims=True)
        cmd = np.where(speed > rc.v_lim, actions * (rc.v_lim / np.maximum(speed, 1e-300)), actions)
        dv = cmd - self.vel
        dvn = np.linalg.norm(dv, axis=1, keepdims=True)
        max_dv = rc.a_max * rc.dt
        dv = np.where(dvn > max_dv, dv * (max_dv / np.maximum(dvn, 1e-300)), dv)
        new_vel = np.where(active[:, None], self.vel + dv, self.vel)
        self.prev_vel = self.vel
        self.vel = new_vel
        self.pos = np.where(active[:, None], self.pos + self.vel * rc.dt, self.pos)

        # walkers: constant velocity, specular reflection at the walls
        ex, ey, _ = cfg.world.extent
        mv = active[:, None] & self.dyn_mask
        self.dyn_pos = np.where(mv[..., None], self.dyn_pos + self.dyn_vel * rc.dt, self.dyn_pos)
        half = self.dyn_dims[..., 0] / 2
        for axis, hi in ((0, ex), (1, ey)):
            lo_b, hi_b = half, hi - half
            p = self.dyn_pos[..., axis]
            below, above = p < lo_b, p > hi_b
            p = np.where(below, 2 * lo_b - p, np.where(above, 2 * hi_b - p, p))
            self.dyn_pos[..., axis] = p
            self.dyn_vel[..., axis] = np.where(below | above, -self.dyn_vel[..., axis], self.dyn_vel[..., axis])

        # collisions
        r = rc.radius
        static_hit = sphere_collides_batch(self.log_odds, self.grid_id, self._like, self.pos, r)
        rel = self.dyn_pos[..., :2] - self.pos[:, None, :2]
        dh = np.maximum(np.linalg.norm(rel, axis=-1) - self.dyn_dims[..., 0] / 2, 0.0)
        z = self.pos[:, 2:3]
        dz = np.maximum(np.maximum(-z, z - self.dyn_dims[..., 1]), 0.0)
        dyn_hit = np.any(self.dyn_mask & (dh**2 + dz**2 <= r * r), axis=1)
        ext = np.asarray(cfg.world.extent)
        oob = np.any(self.pos < r, axis=1) | np.any(self.pos > ext - r, axis=1)
        collided = active & (static_hit | dyn_hit | oob)

        tick = self.steps + 1
        new_contact = collided & (tick - self.last_contact >= round(cfg.collision_debounce / rc.dt))
        in_contact = collided
        self.contacts += new_contact
        self.last_contact = np.where(in_contact, tick, self.last_contact)

        self.steps = np.where(active, tick, self.steps)
        reached = active & (np.linalg.norm(self.pos - self.goal, axis=1) < rc.goal_tol)
        timed_out = active & (self.steps >= rc.timeout)
        outcome = self.outcome.copy()
        if cfg.terminate_on_collision:
            outcome[active & timed_out] = TIMEOUT
            outcome[active & reached] = SUCCESS
            outcome[collided] = COLLISION
        else:
            outcome[active & timed_out] = TIMEOUT
            outcome[active & reached & (self.contacts == 0)] = SUCCESS
            outcome[active & reached & (self.contacts > 0)] = COLLISION
            outcome[active & timed_out & (self.contacts > 0)] = COLLISION
        self.outcome = outcome

        # perception for envs that moved
        idx = np.nonzero(active)[0]
        e, c, d, a = self._detections(idx)
        self._tracker_step(idx, e, c, d, a)
        s_stat = self._s_stat.copy()
        if len(idx):
            s_stat[idx] = self.static_rays(idx)
        self._s_stat = s_stat
        bundle = self.observe(s_stat)

        t = self.tracker
        terms = reward_terms_batch(self.pos, self.vel, self.prev_vel, self.goal, self.start,
                                   bundle.s_stat, t.env, t.X[:, :3])
        terms[~active] = 0.0
        rewards = np.sum(terms * cfg.reward.as_array(), axis=1)
        info = StepInfo(collided=collided, out_of_bounds=active & oob, nan_action=nan_action,
                        contacts=new_contact, terms=terms, outcome=self.outcome.copy(), steps=self.steps.copy())
        return bundle, rewards, info

    def _tracker_step(self, idx, e, c, d, a):
        bank = self.tracker
        if len(idx) == self.B:
            bank.step(self.cfg.robot.dt, e, c, d, a)
            return
        # frozen (terminal) envs keep their tracks untouched
        frozen = ~np.isin(bank.env, idx)
        saved = {n: getattr(bank, n)[frozen] for n in ("X", "P", "dims", "aux", "env", "ids", "age", "missed")}
        bank._keep(~frozen)
        bank.step(self.cfg.robot.dt, e, c, d, a)
        for n, v in saved.items():
            setattr(bank, n, np.concatenate([getattr(bank, n), v]))
        bank._keep(np.lexsort((bank.ids, bank.env)))

    def obstacle_snapshot(self, i: int):
        m = self.dyn_mask[i]
        return self.dyn_pos[i, m], self.dyn_vel[i, m], self.dyn_dims[i, m]


def _replace(spec: WorldSpec, **kw) -> WorldSpec:
    from dataclasses import replace
    return replace(spec, **kw)
