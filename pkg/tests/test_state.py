from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from desknav.geometry import make_goal_frame
from desknav.state import EncoderConfig, StateBundle, dynamic_state, encode, internal_state
from desknav.tracker import ObstacleTrack
from desknav.voxelmap import OccupancyGrid, RayConfig

GOLDEN = Path(__file__).parent / "data" / "golden_bundle.npz"


def track(tid, pos, vel=(0, 0, 0), dims=(0.6, 1.8)):
    state = np.zeros(9)
    state[:3], state[3:6] = pos, vel
    return ObstacleTrack(tid, state, np.eye(9), np.asarray(dims, float))


IDENT = make_goal_frame((0, 0, 0), (10, 0, 0))


def test_internal_state_examples():
    assert np.allclose(internal_state((0, 0, 0), (0, 0, 0), (10, 0, 0), IDENT), [1, 0, 0, 10, 0, 0, 0])
    f = make_goal_frame((0, 0, 0), (0, 5, 0))
    at_goal = internal_state((0, 5, 0), (0, 1, 0), (0, 5, 0), f)
    assert np.allclose(at_goal, [0, 0, 0, 0, 1, 0, 0])
    mid = internal_state((5, 0, 0), (2, 0, 0), (10, 0, 0), IDENT)
    assert np.allclose(mid, [1, 0, 0, 5, 2, 0, 0])


def test_dynamic_state_examples():
    cfg = EncoderConfig()
    z = dynamic_state((0, 0, 0), [], cfg, IDENT)
    assert z.shape == (5, 9) and not z.any()
    out = dynamic_state((0, 0, 0), [track(0, (3, 0, 0), (0, 1, 0))], cfg, IDENT)
    assert np.allclose(out[0], [1, 0, 0, 3, 0, 1, 0, 0.6, 1.8])
    assert not out[1:].any()
    out = dynamic_state((0, 0, 0), [track(0, (2, 0, 0)), track(1, (0, 1, 0))], cfg, IDENT)
    assert out[0, 3] == 1.0 and out[1, 3] == 2.0


def test_distance_ties_broken_by_id():
    cfg = EncoderConfig()
    out = dynamic_state((0, 0, 0), [track(7, (0, 2, 0)), track(3, (2, 0, 0))], cfg, IDENT)
    assert np.allclose(out[0, :3], [1, 0, 0])


def test_more_tracks_than_slots_keeps_closest():
    cfg = EncoderConfig(n_d=2)
    ts = [track(i, (d, 0, 0)) for i, d in enumerate([5.0, 1.0, 3.0, 2.0])]
    out = dynamic_state((0, 0, 0), ts, cfg, IDENT)
    assert out[:, 3].tolist() == [1.0, 2.0]


def test_encode_empty_world():
    cfg = EncoderConfig()
    grid = OccupancyGrid(resolution=0.25, dims=(40, 40, 20))
    b = encode((2, 2, 2), (0, 0, 0), (8, 8, 2), grid, [], cfg, make_goal_frame((2, 2, 2), (8, 8, 2)))
    assert b.s_int.shape == (7,) and b.s_dyn.shape == (5, 9) and b.s_stat.shape == (36, 5)
    assert np.all(b.s_stat == cfg.ray.miss_value)
    assert not b.s_dyn.any()
    assert b.s_int[3] == pytest.approx(np.hypot(6, 6))


def fixture_scene(yaw=0.0):
    """A small fixed scene, optionally rotated about world z through (5, 5)."""
    c, s = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    pivot = np.array([5.0, 5.0, 0.0])

    def rot(p):
        return Rz @ (np.asarray(p, float) - pivot) + pivot

    return rot, Rz


def golden_inputs():
    grid = OccupancyGrid(resolution=0.25, dims=(40, 40, 20))
    grid.fill_cylinder((7.0, 5.5), 0.5, 0.0, 5.0)
    grid.fill_cylinder((3.5, 3.0), 0.3, 0.0, 5.0)
    tracks = [track(0, (6.0, 4.0, 0.9), (0.0, 1.0, 0.0), (0.5, 1.8)),
              track(1, (4.0, 6.5, 0.9), (-1.0, 0.0, 0.0), (0.7, 2.2))]
    start, goal = np.array([2.0, 2.0, 1.5]), np.array([9.0, 8.0, 1.5])
    pos, vel = np.array([4.5, 4.5, 1.5]), np.array([1.0, 0.5, 0.0])
    return grid, tracks, start, goal, pos, vel


def test_golden_snapshot():
    grid, tracks, start, goal, pos, vel = golden_inputs()
    b = encode(pos, vel, goal, grid, tracks, EncoderConfig(), make_goal_frame(start, goal))
    ref = np.load(GOLDEN)
    np.testing.assert_allclose(b.s_int, ref["s_int"], atol=1e-12)
    np.testing.assert_allclose(b.s_dyn, ref["s_dyn"], atol=1e-12)
    np.testing.assert_allclose(b.s_stat, ref["s_stat"], atol=1e-12)


def test_rotation_invariance():
    """Rotating the scene about world z leaves the bundle unchanged.

    The grid cannot be rotated exactly, so the static part uses an empty map
    and the check concentrates on the internal and dynamic states."""
    cfg = EncoderConfig(ray=RayConfig())
    grid = OccupancyGrid(resolution=0.25, dims=(40, 40, 20))
    _, tracks, start, goal, pos, vel = golden_inputs()
    base = encode(pos, vel, goal, grid, tracks, cfg, make_goal_frame(start, goal))
    for yaw in np.linspace(0.3, 6.0, 7):
        rot, Rz = fixture_scene(yaw)
        ts = [track(t.id, rot(t.position), Rz @ t.velocity, t.dims) for t in tracks]
        b = encode(rot(pos), Rz @ vel, rot(goal), grid, ts, cfg, make_goal_frame(rot(start), rot(goal)))
        np.testing.assert_allclose(b.s_int, base.s_int, atol=1e-6)
        np.testing.assert_allclose(b.s_dyn, base.s_dyn, atol=1e-6)


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 3)), max_size=8),
       st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.5, 3)))
def test_dynamic_rows_invariants(points, robot):
    cfg = EncoderConfig()
    f = make_goal_frame((0, 0, 1), (5, 3, 1))
    ts = [track(i, p, (0.3, -0.2, 0)) for i, p in enumerate(points)]
    out = dynamic_state(robot, ts, cfg, f)
    n = min(len(points), cfg.n_d)
    assert np.all(out[n:] == 0.0)
    d = out[:n, 3]
    assert np.all(np.diff(d) >= 0)
    rel = [f.to_goal(t.position, False) - f.to_goal(robot, False) for t in ts]
    rel = sorted(rel, key=np.linalg.norm)[:n]
    for row, r in zip(out[:n], rel):
        assert np.allclose(row[:3] * row[3], r, atol=1e-9)


@given(st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 5)),
       st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2)))
def test_internal_state_invariants(pos, vel):
    f = make_goal_frame((0, 0, 1), (8, 6, 2))
    s = internal_state(pos, vel, (8, 6, 2), f)
    assert s[3] >= 0
    n = np.linalg.norm(s[:3])
    assert abs(n - 1) < 1e-9 or (n == 0 and s[3] < 1e-6)
    assert np.allclose(s[:3] * s[3], f.rotation @ (np.array([8, 6, 2]) - pos), atol=1e-9)


def test_stack_and_index():
    b = StateBundle(np.zeros(7), np.zeros((5, 9)), np.ones((36, 5)))
    s = StateBundle.stack([b, b])
    assert s.s_stat.shape == (2, 36, 5) and s[1].s_int.shape == (7,)
