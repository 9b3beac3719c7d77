"""Dynamic-obstacle tracking: greedy feature association + constant-acceleration KF.

State layout is ``[p(3), v(3), a(3)]``. Measurements are obstacle centres.
All tracks of many environments live in one :class:`TrackerBank` so the
simulator can predict/update every env in a handful of vectorised calls;
:class:`Tracker` is the single-environment view used by the per-track API.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

FEATURE_DIM = 7  # position 3, dims 2, point count 1, point std 1


@dataclass
class TrackerConfig:
    # simulated walkers move at constant velocity, so acceleration is kept stiff
    jerk_psd: float = 1e-3  # white-jerk spectral density, m^2/s^5
    meas_std: float = 0.1
    spawn_pos_std: float = 0.2
    spawn_vel_std: float = 2.0
    spawn_acc_std: float = 0.05
    prune_after: int = 5
    dims_alpha: float = 0.3
    gate_distance: float = 1.5
    # weights/scales of the normalised feature distances (pos, dims, count, std)
    weights: tuple = (1.0, 0.5, 0.25, 0.25)
    scales: tuple = (1.0, 0.5, 1.0, 1.0)

    @property
    def gate_score(self) -> float:
        return float(np.exp(-self.weights[0] * self.gate_distance / self.scales[0]))


@dataclass
class Detection:
    center: np.ndarray
    dims: np.ndarray  # (width, height)
    point_count: float = 100.0
    point_std: float = 0.2

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(2)
        if np.any(self.dims <= 0):
            raise ValueError("detection dims must be positive")

    @property
    def feature(self) -> np.ndarray:
        return np.concatenate([self.center, self.dims, [self.point_count, self.point_std]])


@dataclass
class ObstacleTrack:
    id: int
    state: np.ndarray
    covariance: np.ndarray
    dims: np.ndarray
    point_count: float = 100.0
    point_std: float = 0.2
    age: int = 0
    missed_frames: int = 0

    @property
    def position(self) -> np.ndarray:
        return self.state[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[3:6]

    @property
    def feature(self) -> np.ndarray:
        return np.concatenate([self.position, self.dims, [self.point_count, self.point_std]])


def transition(dt: float) -> np.ndarray:
    f1 = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    return np.kron(f1, np.eye(3))


def process_noise(dt: float, psd: float) -> np.ndarray:
    q1 = psd * np.array([
        [dt**5 / 20, dt**4 / 8, dt**3 / 6],
        [dt**4 / 8, dt**3 / 3, dt**2 / 2],
        [dt**3 / 6, dt**2 / 2, dt],
    ])
    return np.kron(q1, np.eye(3))


H = np.hstack([np.eye(3), np.zeros((3, 6))])


@nb.njit(cache=True)
def _predict_rows(X, P, F, Q):
    n = X.shape[0]
    Xo = np.zeros_like(X)
    Po = np.zeros_like(P)
    FP = np.zeros((9, 9))
    for k in range(n):
        for i in range(9):
            acc = 0.0
            for j in range(9):
                acc += F[i, j] * X[k, j]
            Xo[k, i] = acc
        for i in range(9):
            for j in range(9):
                acc = 0.0
                for m in range(9):
                    acc += F[i, m] * P[k, m, j]
                FP[i, j] = acc
        for i in range(9):
            for j in range(9):
                acc = 0.0
                for m in range(9):
                    acc += FP[i, m] * F[j, m]
                Po[k, i, j] = acc + Q[i, j]
        for i in range(9):
            for j in range(i + 1, 9):
                a = 0.5 * (Po[k, i, j] + Po[k, j, i])
                Po[k, i, j] = a
                Po[k, j, i] = a
    return Xo, Po


@nb.njit(cache=True)
def _update_rows(X, P, Z, r):
    n = X.shape[0]
    Xo = X.copy()
    Po = P.copy()
    ok = np.zeros(n, np.bool_)
    S = np.zeros((3, 3))
    Si = np.zeros((3, 3))
    K = np.zeros((9, 3))
    A = np.zeros((9, 9))
    AP = np.zeros((9, 9))
    for k in range(n):
        finite = True
        for i in range(3):
            for j in range(3):
                S[i, j] = P[k, i, j] + (r if i == j else 0.0)
                if not np.isfinite(S[i, j]):
                    finite = False
        if not finite:
            continue
        c00 = S[1, 1] * S[2, 2] - S[1, 2] * S[2, 1]
        c01 = S[1, 2] * S[2, 0] - S[1, 0] * S[2, 2]
        c02 = S[1, 0] * S[2, 1] - S[1, 1] * S[2, 0]
        det = S[0, 0] * c00 + S[0, 1] * c01 + S[0, 2] * c02
        if not abs(det) > 1e-300:
            continue
        ok[k] = True
        Si[0, 0] = c00 / det
        Si[1, 0] = c01 / det
        Si[2, 0] = c02 / det
        Si[0, 1] = (S[0, 2] * S[2, 1] - S[0, 1] * S[2, 2]) / det
        Si[1, 1] = (S[0, 0] * S[2, 2] - S[0, 2] * S[2, 0]) / det
        Si[2, 1] = (S[0, 1] * S[2, 0] - S[0, 0] * S[2, 1]) / det
        Si[0, 2] = (S[0, 1] * S[1, 2] - S[0, 2] * S[1, 1]) / det
        Si[1, 2] = (S[0, 2] * S[1, 0] - S[0, 0] * S[1, 2]) / det
        Si[2, 2] = (S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]) / det
        # K = P H^T S^-1 ; P H^T is the first three columns of P
        for i in range(9):
            for j in range(3):
                acc = 0.0
                for m in range(3):
                    acc += P[k, i, m] * Si[m, j]
                K[i, j] = acc
        for i in range(9):
            acc = 0.0
            for m in range(3):
                acc += K[i, m] * (Z[k, m] - X[k, m])
            Xo[k, i] = X[k, i] + acc
        # Joseph form: (I - KH) P (I - KH)^T + K R K^T
        for i in range(9):
            for j in range(9):
                A[i, j] = (1.0 if i == j else 0.0) - (K[i, j] if j < 3 else 0.0)
        for i in range(9):
            for j in range(9):
                acc = 0.0
                for m in range(9):
                    acc += A[i, m] * P[k, m, j]
                AP[i, j] = acc
        for i in range(9):
            for j in range(9):
                acc = 0.0
                for m in range(9):
                    acc += AP[i, m] * A[j, m]
                kk = 0.0
                for m in range(3):
                    kk += K[i, m] * K[j, m]
                Po[k, i, j] = acc + r * kk
        for i in range(9):
            for j in range(i + 1, 9):
                a = 0.5 * (Po[k, i, j] + Po[k, j, i])
                Po[k, i, j] = a
                Po[k, j, i] = a
    return Xo, Po, ok


# Row-wise loops rather than stacked BLAS calls: a track's estimate must not
# depend on how many other tracks share the batch, or a single-env replay
# drifts from the vectorised run by an ulp.
def predict_arrays(X, P, dt, psd):
    """Batched predict: X (n, 9), P (n, 9, 9)."""
    X = np.ascontiguousarray(X, dtype=float).reshape(-1, 9)
    P = np.ascontiguousarray(P, dtype=float).reshape(-1, 9, 9)
    return _predict_rows(X, P, transition(dt), process_noise(dt, psd))


def update_arrays(X, P, Z, meas_std):
    """Batched Joseph-form correction with position measurements Z (n, 3).

    Returns (X, P, ok) where ``ok`` flags rows whose innovation covariance
    was invertible; other rows are returned unchanged.
    """
    X = np.ascontiguousarray(X, dtype=float).reshape(-1, 9)
    P = np.ascontiguousarray(P, dtype=float).reshape(-1, 9, 9)
    Z = np.ascontiguousarray(Z, dtype=float).reshape(-1, 3)
    return _update_rows(X, P, Z, float(meas_std) ** 2)


@nb.njit(cache=True)
def _greedy_assoc(track_env, track_feat, det_env, det_feat, weights, scales, gate, n_envs):
    nt = track_env.shape[0]
    nd = det_env.shape[0]
    track_match = np.full(nt, -1, np.int64)
    det_used = np.zeros(nd, np.bool_)
    # tracks and detections are grouped by env (sorted env ids)
    t_start = np.zeros(n_envs + 1, np.int64)
    d_start = np.zeros(n_envs + 1, np.int64)
    for i in range(nt):
        t_start[track_env[i] + 1] += 1
    for i in range(nd):
        d_start[det_env[i] + 1] += 1
    for e in range(n_envs):
        t_start[e + 1] += t_start[e]
        d_start[e + 1] += d_start[e]
    for e in range(n_envs):
        t0, t1 = t_start[e], t_start[e + 1]
        d0, d1 = d_start[e], d_start[e + 1]
        if t1 == t0 or d1 == d0:
            continue
        score = np.empty((t1 - t0, d1 - d0))
        for i in range(t0, t1):
            for j in range(d0, d1):
                tf = track_feat[i]
                df = det_feat[j]
                dp = np.sqrt((tf[0] - df[0]) ** 2 + (tf[1] - df[1]) ** 2 + (tf[2] - df[2]) ** 2)
                dd = np.sqrt((tf[3] - df[3]) ** 2 + (tf[4] - df[4]) ** 2)
                dc = abs(tf[5] - df[5]) / max(abs(tf[5]), abs(df[5]), 1e-9)
                ds = abs(tf[6] - df[6]) / max(abs(tf[6]), abs(df[6]), 1e-9)
                s = (weights[0] * dp / scales[0] + weights[1] * dd / scales[1]
                     + weights[2] * dc / scales[2] + weights[3] * ds / scales[3])
                score[i - t0, j - d0] = np.exp(-s)
        while True:
            best = -1.0
            bi = -1
            bj = -1
            for i in range(t1 - t0):
                if track_match[t0 + i] >= 0:
                    continue
                for j in range(d1 - d0):
                    if det_used[d0 + j]:
                        continue
                    if score[i, j] > best:
                        best = score[i, j]
                        bi = i
                        bj = j
            if bi < 0 or best < gate:
                break
            track_match[t0 + bi] = d0 + bj
            det_used[d0 + bj] = True
    return track_match


class TrackerBank:
    """Tracks for ``n_envs`` independent environments, stored flat."""

    def __init__(self, n_envs: int, cfg: TrackerConfig | None = None):
        self.n_envs = n_envs
        self.cfg = cfg or TrackerConfig()
        self.X = np.zeros((0, 9))
        self.P = np.zeros((0, 9, 9))
        self.dims = np.zeros((0, 2))
        self.aux = np.zeros((0, 2))  # point count, point std
        self.env = np.zeros(0, np.int64)
        self.ids = np.zeros(0, np.int64)
        self.age = np.zeros(0, np.int64)
        self.missed = np.zeros(0, np.int64)
        self.next_id = np.zeros(n_envs, np.int64)

    def __len__(self):
        return len(self.ids)

    def _keep(self, mask):
        for name in ("X", "P", "dims", "aux", "env", "ids", "age", "missed"):
            setattr(self, name, getattr(self, name)[mask])

    def reset_envs(self, envs):
        envs = np.asarray(envs, np.int64)
        if len(envs) == 0:
            return
        self._keep(~np.isin(self.env, envs))
        self.next_id[envs] = 0

    def features(self) -> np.ndarray:
        return np.hstack([self.X[:, :3], self.dims, self.aux])

    def step(self, dt, det_env, det_center, det_dims, det_aux):
        """predict -> associate -> update -> spawn -> prune, for all envs at once."""
        cfg = self.cfg
        det_env = np.asarray(det_env, np.int64)
        order = np.argsort(det_env, kind="stable")
        det_env, det_center = det_env[order], np.asarray(det_center, float)[order]
        det_dims, det_aux = np.asarray(det_dims, float)[order], np.asarray(det_aux, float)[order]
        if len(self):
            self.X, self.P = predict_arrays(self.X, self.P, dt, cfg.jerk_psd)
            self.age += 1
        det_feat = np.hstack([det_center, det_dims, det_aux]).reshape(-1, FEATURE_DIM)
        match = _greedy_assoc(self.env, self.features().reshape(-1, FEATURE_DIM), det_env,
                              det_feat, np.asarray(cfg.weights, float), np.asarray(cfg.scales, float),
                              cfg.gate_score, self.n_envs)
        matched = match >= 0
        if np.any(matched):
            idx = np.nonzero(matched)[0]
            X, P, ok = update_arrays(self.X[idx], self.P[idx], det_center[match[idx]], cfg.meas_std)
            self.X[idx], self.P[idx] = X, P
            good = idx[ok]
            a = cfg.dims_alpha
            self.dims[good] = (1 - a) * self.dims[good] + a * det_dims[match[good]]
            self.aux[good] = det_aux[match[good]]
            self.missed[good] = 0
            self.missed[idx[~ok]] += 1
        self.missed[~matched] += 1
        used = np.zeros(len(det_env), bool)
        used[match[matched]] = True
        new = np.nonzero(~used)[0]
        if len(new):
            n = len(new)
            X = np.zeros((n, 9))
            X[:, :3] = det_center[new]
            var = np.repeat([cfg.spawn_pos_std**2, cfg.spawn_vel_std**2, cfg.spawn_acc_std**2], 3)
            envs = det_env[new]
            ids = np.empty(n, np.int64)
            for k, e in enumerate(envs):
                ids[k] = self.next_id[e]
                self.next_id[e] += 1
            self.X = np.vstack([self.X, X])
            self.P = np.concatenate([self.P, np.broadcast_to(np.diag(var), (n, 9, 9))])
            self.dims = np.vstack([self.dims, det_dims[new]])
            self.aux = np.vstack([self.aux, det_aux[new]])
            self.env = np.concatenate([self.env, envs])
            self.ids = np.concatenate([self.ids, ids])
            self.age = np.concatenate([self.age, np.zeros(n, np.int64)])
            self.missed = np.concatenate([self.missed, np.zeros(n, np.int64)])
        self._keep(self.missed <= cfg.prune_after)
        # keep rows grouped by env for the association kernel
        order = np.lexsort((self.ids, self.env))
        self._keep(order)

    def tracks_of(self, e: int) -> list[ObstacleTrack]:
        rows = np.nonzero(self.env == e)[0]
        return [ObstacleTrack(id=int(self.ids[r]), state=self.X[r].copy(), covariance=self.P[r].copy(),
                              dims=self.dims[r].copy(), point_count=float(self.aux[r, 0]),
                              point_std=float(self.aux[r, 1]), age=int(self.age[r]),
                              missed_frames=int(self.missed[r])) for r in rows]


# ------------------------------------------------------- single-env API

class Tracker:
    def __init__(self, cfg: TrackerConfig | None = None):
        self.bank = TrackerBank(1, cfg)

    @property
    def cfg(self):
        return self.bank.cfg

    @property
    def tracks(self) -> list[ObstacleTrack]:
        return self.bank.tracks_of(0)


def step_tracker(tracker: Tracker, dets: list[Detection], dt: float) -> list[ObstacleTrack]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = len(dets)
    centers = np.array([d.center for d in dets]).reshape(n, 3)
    dims = np.array([d.dims for d in dets]).reshape(n, 2)
    aux = np.array([[d.point_count, d.point_std] for d in dets]).reshape(n, 2)
    tracker.bank.step(dt, np.zeros(n, np.int64), centers, dims, aux)
    return tracker.tracks


def associate(tracks: list[ObstacleTrack], dets: list[Detection],
              cfg: TrackerConfig | None = None) -> list[tuple[int, int]]:
    """Greedy best-score-first one-to-one matching; returns (track_id, det_index)."""
    cfg = cfg or TrackerConfig()
    if not tracks or not dets:
        return []
    tf = np.array([t.feature for t in tracks])
    df = np.array([d.feature for d in dets])
    match = _greedy_assoc(np.zeros(len(tracks), np.int64), tf, np.zeros(len(dets), np.int64), df,
                          np.asarray(cfg.weights, float), np.asarray(cfg.scales, float),
                          cfg.gate_score, 1)
    return [(tracks[i].id, int(j)) for i, j in enumerate(match) if j >= 0]


def kf_predict(track: ObstacleTrack, dt: float, cfg: TrackerConfig | None = None) -> ObstacleTrack:
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or TrackerConfig()
    X, P = predict_arrays(track.state[None], track.covariance[None], dt, cfg.jerk_psd)
    return ObstacleTrack(track.id, X[0], P[0], track.dims.copy(), track.point_count, track.point_std,
                         track.age + 1, track.missed_frames)


def kf_update(track: ObstacleTrack, det: Detection, cfg: TrackerConfig | None = None) -> ObstacleTrack:
    cfg = cfg or TrackerConfig()
    X, P, ok = update_arrays(track.state[None], track.covariance[None], det.center[None], cfg.meas_std)
    if not ok[0]:
        return ObstacleTrack(track.id, track.state.copy(), track.covariance.copy(), track.dims.copy(),
                             track.point_count, track.point_std, track.age, track.missed_frames + 1)
    a = cfg.dims_alpha
    return ObstacleTrack(track.id, X[0], P[0], (1 - a) * track.dims + a * det.dims,
                         det.point_count, det.point_std, track.age, 0)


def spawn_track(det: Detection, track_id: int, cfg: TrackerConfig | None = None) -> ObstacleTrack:
    cfg = cfg or TrackerConfig()
    X = np.zeros(9)
    X[:3] = det.center
    var = np.repeat([cfg.spawn_pos_std**2, cfg.spawn_vel_std**2, cfg.spawn_acc_std**2], 3)
    return ObstacleTrack(track_id, X, np.diag(var), det.dims.copy(), det.point_count, det.point_std)
