"""Fixed-size log-odds voxel grid, ray casting and the static obstacle matrix.

The grid stores one float64 log-odds value per voxel in a flat array that is
allocated once. Flat index of voxel (i, j, k) is ``(i * ny + j) * nz + k``.
A voxel is occupied when its log-odds is strictly positive.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .geometry import AABB

MAGIC = b"DNVG"
VERSION = 1
_HEADER = struct.Struct("<4sI3Id3d")


@dataclass(frozen=True)
class RayConfig:
    n_h: int = 36
    n_v: int = 5
    v_fov: tuple = (-np.pi / 6, np.pi / 6)
    max_range: float = 4.0
    miss_offset: float = 0.1

    def __post_init__(self):
        if self.n_h < 4 or self.n_v < 1:
            raise ValueError(f"need n_h >= 4 and n_v >= 1, got {self.n_h}, {self.n_v}")
        if self.max_range <= 0 or self.miss_offset <= 0:
            raise ValueError("max_range and miss_offset must be positive")

    @property
    def miss_value(self) -> float:
        return self.max_range + self.miss_offset

    def directions(self) -> np.ndarray:
        """Unit ray directions (n_h, n_v, 3) in the robot's goal frame."""
        az = 2.0 * np.pi * np.arange(self.n_h) / self.n_h
        if self.n_v == 1:
            el = np.array([0.5 * (self.v_fov[0] + self.v_fov[1])])
        else:
            el = np.linspace(self.v_fov[0], self.v_fov[1], self.n_v)
        ca, sa = np.cos(az)[:, None], np.sin(az)[:, None]
        ce, se = np.cos(el)[None, :], np.sin(el)[None, :]
        d = np.stack(np.broadcast_arrays(ca * ce, sa * ce, se + 0 * ca), axis=-1)
        return np.ascontiguousarray(d)


@dataclass(eq=False)
class OccupancyGrid:
    resolution: float = 0.25
    dims: tuple = (80, 80, 20)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    l_occ: float = 0.85
    l_free: float = -0.4
    l_min: float = -2.0
    l_max: float = 3.5
    log_odds: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        n = self.dims[0] * self.dims[1] * self.dims[2]
        if self.log_odds is None:
            self.log_odds = np.zeros(n)
        elif self.log_odds.shape != (n,) or self.log_odds.dtype != np.float64:
            raise ValueError(f"log_odds must be float64 of length {n}")

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.dims) * self.resolution

    def view3d(self) -> np.ndarray:
        return self.log_odds.reshape(self.dims)

    def voxel_index(self, p):
        ijk = np.floor((np.asarray(p, dtype=np.float64) - self.origin) / self.resolution)
        return tuple(int(v) for v in ijk)

    def voxel_center(self, ijk) -> np.ndarray:
        return self.origin + (np.asarray(ijk, dtype=np.float64) + 0.5) * self.resolution

    def in_bounds(self, ijk) -> bool:
        return all(0 <= ijk[a] < self.dims[a] for a in range(3))

    def clear(self):
        self.log_odds[:] = 0.0

    # -- rasterisation helpers used by the world generator --

    def fill_cylinder(self, center_xy, radius, z0, z1, value=None):
        """Mark voxels whose centre lies in a vertical cylinder."""
        value = self.l_max if value is None else value
        nx, ny, nz = self.dims
        _fill_cylinder(self.log_odds, nx, ny, nz, self.resolution, self.origin,
                       float(center_xy[0]), float(center_xy[1]), float(radius), float(z0), float(z1),
                       float(value))

    def fill_box(self, box: AABB, value=None):
        """Mark voxels whose centre lies inside ``box``."""
        value = self.l_max if value is None else value
        nx, ny, nz = self.dims
        _fill_box(self.log_odds, nx, ny, nz, self.resolution, self.origin,
                  np.asarray(box.lo, np.float64), np.asarray(box.hi, np.float64), float(value))


# ---------------------------------------------------------------- kernels

@nb.njit(cache=True)
def _dda_setup(p, d, origin, res):
    idx = np.empty(3, np.int64)
    step = np.zeros(3, np.int64)
    t_max = np.empty(3)
    t_delta = np.empty(3)
    for a in range(3):
        g = (p[a] - origin[a]) / res
        idx[a] = np.int64(np.floor(g))
        if d[a] > 0.0:
            step[a] = 1
            t_max[a] = (idx[a] + 1 - g) * res / d[a]
            t_delta[a] = res / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            t_max[a] = (g - idx[a]) * res / (-d[a])
            t_delta[a] = res / (-d[a])
        else:
            t_max[a] = np.inf
            t_delta[a] = np.inf
    return idx, step, t_max, t_delta


@nb.njit(cache=True)
def _flat(i, j, k, nx, ny, nz):
    if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
        return -1
    return (i * ny + j) * nz + k


@nb.njit(cache=True)
def _argmin3(t):
    # ties go to the lowest axis index
    a = 0
    if t[1] < t[a]:
        a = 1
    if t[2] < t[a]:
        a = 2
    return a


@nb.njit(cache=True, inline="always")
def _axis_setup(pa, da, oa, res):
    g = (pa - oa) / res
    i = np.int64(np.floor(g))
    if da > 0.0:
        return i, 1, (i + 1 - g) * res / da, res / da
    if da < 0.0:
        return i, -1, (g - i) * res / (-da), res / (-da)
    return i, 0, np.inf, np.inf


@nb.njit(cache=True)
def _raycast_one(log_odds, nx, ny, nz, res, origin, p, d, max_range, miss_value):
    i, si, ti, di = _axis_setup(p[0], d[0], origin[0], res)
    j, sj, tj, dj = _axis_setup(p[1], d[1], origin[1], res)
    k, sk, tk, dk = _axis_setup(p[2], d[2], origin[2], res)
    inside = 0 <= i < nx and 0 <= j < ny and 0 <= k < nz
    if inside and log_odds[(i * ny + j) * nz + k] > 0.0:
        return 0.0
    while True:
        # ties go to the lowest axis index
        if ti <= tj and ti <= tk:
            t = ti
            if t > max_range:
                return miss_value
            i += si
            ti += di
        elif tj <= tk:
            t = tj
            if t > max_range:
                return miss_value
            j += sj
            tj += dj
        else:
            t = tk
            if t > max_range:
                return miss_value
            k += sk
            tk += dk
        if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
            inside = True
            if log_odds[(i * ny + j) * nz + k] > 0.0:
                return t
        elif inside:
            # a ray that has left the (convex) grid never re-enters it
            return miss_value


@nb.njit(cache=True)
def _raycast_batch(log_odds2d, grid_id, nx, ny, nz, res, origin, points, dirs, max_range, miss_value):
    """points (B, 3), dirs (B, R, 3), grid_id (B,) rows of log_odds2d -> (B, R)."""
    B = points.shape[0]
    R = dirs.shape[1]
    out = np.empty((B, R))
    for b in range(B):
        lo = log_odds2d[grid_id[b]]
        for r in range(R):
            out[b, r] = _raycast_one(lo, nx, ny, nz, res, origin, points[b], dirs[b, r],
                                     max_range, miss_value)
    return out


@nb.njit(cache=True)
def _update_ray(log_odds, nx, ny, nz, res, origin, p, hit, l_occ, l_free, l_min, l_max):
    hi = np.empty(3, np.int64)
    for a in range(3):
        hi[a] = np.int64(np.floor((hit[a] - origin[a]) / res))
    fh = _flat(hi[0], hi[1], hi[2], nx, ny, nz)
    if fh < 0:
        return
    d = hit - p
    length = np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
    if length > 0.0:
        d = d / length
        idx, step, t_max, t_delta = _dda_setup(p, d, origin, res)
        # bounded walk; stops on reaching the hit voxel
        for _ in range(nx + ny + nz + 3):
            if idx[0] == hi[0] and idx[1] == hi[1] and idx[2] == hi[2]:
                break
            f = _flat(idx[0], idx[1], idx[2], nx, ny, nz)
            if f >= 0:
                log_odds[f] = min(max(log_odds[f] + l_free, l_min), l_max)
            a = _argmin3(t_max)
            if t_max[a] > length + res:
                break
            idx[a] += step[a]
            t_max[a] += t_delta[a]
    log_odds[fh] = min(max(log_odds[fh] + l_occ, l_min), l_max)


@nb.njit(cache=True)
def _sphere_hits_voxels(log_odds, nx, ny, nz, res, origin, p, radius):
    lo = np.empty(3, np.int64)
    hi = np.empty(3, np.int64)
    dims = (nx, ny, nz)
    for a in range(3):
        lo[a] = max(np.int64(np.floor((p[a] - radius - origin[a]) / res)), 0)
        hi[a] = min(np.int64(np.floor((p[a] + radius - origin[a]) / res)), dims[a] - 1)
    r2 = radius * radius
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            for k in range(lo[2], hi[2] + 1):
                if log_odds[(i * ny + j) * nz + k] <= 0.0:
                    continue
                # squared distance from p to the voxel cube
                d2 = 0.0
                c = (i, j, k)
                for a in range(3):
                    vlo = origin[a] + c[a] * res
                    vhi = vlo + res
                    if p[a] < vlo:
                        d2 += (vlo - p[a]) ** 2
                    elif p[a] > vhi:
                        d2 += (p[a] - vhi) ** 2
                if d2 < r2:
                    return True
    return False


@nb.njit(cache=True)
def _sphere_hits_batch(log_odds2d, grid_id, nx, ny, nz, res, origin, points, radius):
    B = points.shape[0]
    out = np.zeros(B, np.bool_)
    for b in range(B):
        out[b] = _sphere_hits_voxels(log_odds2d[grid_id[b]], nx, ny, nz, res, origin,
                                     points[b], radius)
    return out


@nb.njit(cache=True)
def _fill_box(log_odds, nx, ny, nz, res, origin, lo, hi, value):
    dims = (nx, ny, nz)
    a0 = np.empty(3, np.int64)
    a1 = np.empty(3, np.int64)
    for a in range(3):
        a0[a] = max(np.int64(np.floor((lo[a] - origin[a]) / res)), 0)
        a1[a] = min(np.int64(np.floor((hi[a] - origin[a]) / res)), dims[a] - 1)
    for i in range(a0[0], a1[0] + 1):
        x = origin[0] + (i + 0.5) * res
        if x < lo[0] or x > hi[0]:
            continue
        for j in range(a0[1], a1[1] + 1):
            y = origin[1] + (j + 0.5) * res
            if y < lo[1] or y > hi[1]:
                continue
            for k in range(a0[2], a1[2] + 1):
                z = origin[2] + (k + 0.5) * res
                if lo[2] <= z <= hi[2]:
                    log_odds[(i * ny + j) * nz + k] = value


@nb.njit(cache=True)
def _fill_cylinder(log_odds, nx, ny, nz, res, origin, cx, cy, radius, z0, z1, value):
    lo = np.array([cx - radius, cy - radius, z0])
    hi = np.array([cx + radius, cy + radius, z1])
    dims = (nx, ny, nz)
    a0 = np.empty(3, np.int64)
    a1 = np.empty(3, np.int64)
    for a in range(3):
        a0[a] = max(np.int64(np.floor((lo[a] - origin[a]) / res)), 0)
        a1[a] = min(np.int64(np.floor((hi[a] - origin[a]) / res)), dims[a] - 1)
    r2 = radius * radius
    for i in range(a0[0], a1[0] + 1):
        x = origin[0] + (i + 0.5) * res
        for j in range(a0[1], a1[1] + 1):
            y = origin[1] + (j + 0.5) * res
            if (x - cx) ** 2 + (y - cy) ** 2 > r2:
                continue
            for k in range(a0[2], a1[2] + 1):
                z = origin[2] + (k + 0.5) * res
                if z0 <= z <= z1:
                    log_odds[(i * ny + j) * nz + k] = value


# ------------------------------------------------------------- public API

def update_occupancy(grid: OccupancyGrid, sensor_origin, hit_points, dynamic_boxes=()):
    """Integrate one scan of hit points, then clear dynamic-obstacle boxes.

    Voxels along each ray before the hit receive ``l_free``; the hit voxel
    receives ``l_occ``. Rays whose hit lies outside the grid are dropped.
    """
    p = np.asarray(sensor_origin, dtype=np.float64).reshape(3)
    nx, ny, nz = grid.dims
    for h in np.asarray(hit_points, dtype=np.float64).reshape(-1, 3):
        if not np.all(np.isfinite(h)):
            continue
        _update_ray(grid.log_odds, nx, ny, nz, grid.resolution, grid.origin, p, h,
                    grid.l_occ, grid.l_free, grid.l_min, grid.l_max)
    for box in dynamic_boxes:
        grid.fill_box(box, 0.0)


def is_occupied(grid: OccupancyGrid, p) -> bool:
    ijk = grid.voxel_index(p)
    if not grid.in_bounds(ijk):
        return False
    i, j, k = ijk
    return bool(grid.log_odds[(i * grid.dims[1] + j) * grid.dims[2] + k] > 0.0)


def raycast(grid: OccupancyGrid, origin, direction, max_range: float,
            miss_offset: float = 0.1) -> float:
    """Distance to the entry face of the first occupied voxel along a ray.

    Returns 0 when the origin voxel itself is occupied and
    ``max_range + miss_offset`` when nothing is hit within ``max_range``.
    """
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("ray direction must be a unit vector")
    p = np.asarray(origin, dtype=np.float64).reshape(3)
    nx, ny, nz = grid.dims
    return float(_raycast_one(grid.log_odds, nx, ny, nz, grid.resolution, grid.origin, p, d,
                              float(max_range), float(max_range + miss_offset)))


def static_state(grid: OccupancyGrid, robot_pos, cfg: RayConfig, rotation=None) -> np.ndarray:
    """Ray-length matrix (n_h, n_v) around ``robot_pos``.

    ``rotation`` is the world->goal rotation; ray directions are laid out in
    the goal frame and rotated back to the world for casting.
    """
    dirs = cfg.directions().reshape(-1, 3)
    if rotation is not None:
        dirs = dirs @ np.asarray(rotation)
    out = static_state_batch(grid.log_odds[None, :], np.zeros(1, np.int64), grid,
                             np.asarray(robot_pos, dtype=np.float64).reshape(1, 3),
                             dirs[None], cfg)
    return out[0].reshape(cfg.n_h, cfg.n_v)


def static_state_batch(log_odds2d, grid_id, like: OccupancyGrid, points, world_dirs, cfg: RayConfig):
    """Cast (B, R) rays against per-env grids sharing ``like``'s geometry."""
    nx, ny, nz = like.dims
    return _raycast_batch(log_odds2d, np.asarray(grid_id, np.int64), nx, ny, nz, like.resolution,
                          like.origin, np.ascontiguousarray(points, dtype=np.float64),
                          np.ascontiguousarray(world_dirs, dtype=np.float64),
                          float(cfg.max_range), float(cfg.miss_value))


def sphere_collides(grid: OccupancyGrid, center, radius: float) -> bool:
    nx, ny, nz = grid.dims
    return bool(_sphere_hits_voxels(grid.log_odds, nx, ny, nz, grid.resolution, grid.origin,
                                    np.asarray(center, dtype=np.float64).reshape(3), float(radius)))


def sphere_collides_batch(log_odds2d, grid_id, like: OccupancyGrid, centers, radius: float):
    nx, ny, nz = like.dims
    return _sphere_hits_batch(log_odds2d, np.asarray(grid_id, np.int64), nx, ny, nz,
                              like.resolution, like.origin,
                              np.ascontiguousarray(centers, dtype=np.float64), float(radius))


# ----------------------------------------------------------- file format

def save_grid(grid: OccupancyGrid, path):
    """Binary snapshot: little-endian header followed by the raw log-odds."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, *grid.dims, grid.resolution, *grid.origin))
        fh.write(grid.log_odds.astype("<f8").tobytes())


def load_grid(path, **thresholds) -> OccupancyGrid:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ValueError("truncated grid header")
        magic, version, nx, ny, nz, res, ox, oy, oz = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"unsupported grid version {version}")
        raw = fh.read()
    n = nx * ny * nz
    if len(raw) != 8 * n:
        raise ValueError(f"expected {8 * n} bytes of log-odds, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return OccupancyGrid(resolution=res, dims=(nx, ny, nz), origin=np.array([ox, oy, oz]),
                         log_odds=data, **thresholds)
