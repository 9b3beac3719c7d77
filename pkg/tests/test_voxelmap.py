import numpy as np
import pytest
from hypothesis import given, strategies as st

from desknav.geometry import AABB
from desknav.voxelmap import (OccupancyGrid, RayConfig, is_occupied, load_grid, raycast, save_grid,
                              sphere_collides, static_state, update_occupancy)
from oracles import march_raycast


def small_grid(**kw):
    return OccupancyGrid(resolution=0.25, dims=(16, 16, 8), **kw)


def test_single_hit_trace():
    g = small_grid()
    hit = g.voxel_center((10, 4, 2))
    update_occupancy(g, g.voxel_center((2, 4, 2)), [hit])
    v = g.view3d()
    assert v[10, 4, 2] == pytest.approx(g.l_occ)
    # ray runs along +x through the row, so voxels 2..9 each get one free update
    assert np.allclose(v[2:10, 4, 2], g.l_free)
    assert np.count_nonzero(v) == 9


def test_hit_in_dynamic_box_is_cleared():
    g = small_grid()
    hit = g.voxel_center((8, 8, 4))
    update_occupancy(g, g.voxel_center((1, 8, 4)), [hit],
                     dynamic_boxes=[AABB(hit - 0.3, hit + 0.3)])
    assert g.view3d()[8, 8, 4] == 0.0


def test_repeated_hits_clamp_at_l_max():
    g = small_grid()
    hit = g.voxel_center((5, 5, 5))
    for _ in range(20):
        update_occupancy(g, g.voxel_center((5, 1, 5)), [hit])
    assert g.view3d()[5, 5, 5] == g.l_max
    assert g.log_odds.min() >= g.l_min


def test_out_of_bounds_points_ignored():
    g = small_grid()
    update_occupancy(g, (1, 1, 1), [(100, 1, 1), (np.nan, 0, 0)])
    assert not g.log_odds.any()


def test_is_occupied_rules():
    g = small_grid()
    assert not is_occupied(g, (1.0, 1.0, 1.0))
    g.view3d()[3, 3, 3] = g.l_occ
    assert is_occupied(g, g.voxel_center((3, 3, 3)))
    assert not is_occupied(g, (-0.25, 1.0, 1.0))
    assert not is_occupied(g, (g.extent[0] + 0.25, 1.0, 1.0))


def test_raycast_examples():
    g = OccupancyGrid(resolution=0.25, dims=(40, 20, 20))
    assert raycast(g, (1.1, 2.6, 2.6), (1, 0, 0), 4.0) == pytest.approx(4.1)
    # voxel x-index 12 starts at 3.0; origin at x = 1.0 -> entry 2.0 ahead
    g.view3d()[12, 10, 10] = 1.0
    o = np.array([1.0, 10.5 * 0.25, 10.5 * 0.25])
    assert abs(raycast(g, o, (1, 0, 0), 4.0) - 2.0) < 1e-9
    assert raycast(g, g.voxel_center((12, 10, 10)), (0, 1, 0), 4.0) == 0.0
    with pytest.raises(ValueError):
        raycast(g, o, (2, 0, 0), 4.0)


def test_face_tie_goes_to_entered_voxel():
    g = OccupancyGrid(resolution=0.25, dims=(8, 8, 8))
    g.view3d()[4, 4, 4] = 1.0
    # start exactly on the face x = 1.0 between voxel 3 and 4, moving +x
    assert raycast(g, (1.0, 1.1, 1.1), (1, 0, 0), 4.0) == 0.0
    assert raycast(g, (0.5, 1.1, 1.1), (1, 0, 0), 4.0) == pytest.approx(0.5)


def random_case(rng):
    dims = tuple(int(v) for v in rng.integers(6, 20, 3))
    res = float(rng.choice([0.1, 0.2, 0.25, 0.5]))
    g = OccupancyGrid(resolution=res, dims=dims, origin=rng.uniform(-2, 2, 3))
    g.log_odds[:] = np.where(rng.random(g.log_odds.size) < rng.uniform(0.01, 0.15), 1.0, -0.5)
    p = g.origin + rng.uniform(0, 1, 3) * g.extent
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return g, p, d, float(rng.uniform(0.5, 4.0))


def check_against_march(g, p, d, max_range):
    t = raycast(g, p, d, max_range, miss_offset=0.1)
    t_ref, vox_ref = march_raycast(g.view3d(), g.resolution, g.origin, p, d, max_range)
    if t_ref is None:
        return t == pytest.approx(max_range + 0.1) or t > max_range - 1e-3
    if t > max_range:
        return t_ref > max_range - 1e-3
    # voxel the analytic distance enters
    vox = g.voxel_index(p + (t + 1e-9) * d) if t > 0 else g.voxel_index(p)
    return vox == vox_ref and abs(t - t_ref) <= g.resolution


def test_raycast_matches_march_1000_cases():
    rng = np.random.default_rng(7)
    bad = [i for i in range(1000) if not check_against_march(*random_case(rng))]
    assert bad == []


def test_static_state_shapes_and_wall():
    cfg = RayConfig()
    g = OccupancyGrid(resolution=0.25, dims=(40, 40, 20))
    s = static_state(g, (5.0, 5.0, 2.5), cfg)
    assert s.shape == (36, 5)
    assert np.all(s == cfg.miss_value)
    # wall: x-index 28 starts at x = 7.0, 2 m ahead of the robot
    g.view3d()[28, :, :] = 1.0
    s = static_state(g, (5.0, 5.0, 2.5), cfg)
    el = np.linspace(-np.pi / 6, np.pi / 6, 5)
    assert np.allclose(s[0], 2.0 / np.cos(el), atol=1e-9)
    assert np.all(s[18] == cfg.miss_value)
    assert np.all((s > 0) & (s <= cfg.miss_value))


def test_static_state_uses_rotation():
    cfg = RayConfig()
    g = OccupancyGrid(resolution=0.25, dims=(40, 40, 20))
    g.view3d()[:, 28, :] = 1.0  # wall 2 m along +y
    R = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # goal x = world y
    s = static_state(g, (5.0, 5.0, 2.5), cfg, rotation=R)
    assert s[0, 2] == pytest.approx(2.0)


@given(st.integers(0, 2**32 - 1))
def test_occupancy_invariants(seed):
    rng = np.random.default_rng(seed)
    g = small_grid()
    buf = g.log_odds
    addr = buf.__array_interface__["data"][0]
    for _ in range(5):
        hits = g.origin + rng.uniform(-0.5, 1.1, (20, 3)) * g.extent
        update_occupancy(g, g.origin + rng.uniform(0, 1, 3) * g.extent, hits)
        assert g.log_odds.min() >= g.l_min and g.log_odds.max() <= g.l_max
    assert g.log_odds is buf and buf.__array_interface__["data"][0] == addr
    assert len(g.log_odds) == 16 * 16 * 8


def test_three_hits_make_occupied():
    g = small_grid()
    target = g.voxel_center((12, 3, 3))
    for _ in range(3):
        update_occupancy(g, g.voxel_center((2, 3, 3)), [target])
    assert is_occupied(g, target)


def test_snapshot_roundtrip(tmp_path):
    g = OccupancyGrid(resolution=0.2, dims=(5, 6, 7), origin=(1.0, -2.0, 0.5))
    g.log_odds[:] = np.random.default_rng(1).uniform(-2, 3.5, g.log_odds.size)
    path = tmp_path / "grid.bin"
    save_grid(g, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DNVG"
    h = load_grid(path)
    assert h.dims == g.dims and h.resolution == g.resolution
    assert np.array_equal(h.origin, g.origin) and np.array_equal(h.log_odds, g.log_odds)
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_grid(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_grid(path)


def test_sphere_collides():
    g = small_grid()
    g.view3d()[4, 4, 4] = 1.0  # cube [1, 1.25]^3
    assert sphere_collides(g, (1.125, 1.125, 1.125), 0.01)
    assert sphere_collides(g, (1.5, 1.125, 1.125), 0.3)
    assert not sphere_collides(g, (1.6, 1.125, 1.125), 0.3)
