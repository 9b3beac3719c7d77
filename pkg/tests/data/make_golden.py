"""Regenerate golden_bundle.npz from the naive oracles (run once, then frozen).

Static rays: fixed-step march to find the first occupied voxel, then the exact
slab entry distance into that voxel's cube. Internal and dynamic rows: the
defining formulas written out directly.
"""
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

from oracles import march_raycast  # noqa: E402
from test_state import golden_inputs  # noqa: E402


def frame_axes(start, goal):
    x = (goal - start) / np.linalg.norm(goal - start)
    y = np.cross([0.0, 0.0, 1.0], x)
    y /= np.linalg.norm(y)
    return np.stack([x, y, np.cross(x, y)])


def slab_entry(p, d, lo, hi):
    t = []
    for a in range(3):
        if d[a] != 0:
            t.append(min((lo[a] - p[a]) / d[a], (hi[a] - p[a]) / d[a]))
    return float(max(t))


def main():
    grid, tracks, start, goal, pos, vel = golden_inputs()
    R = frame_axes(start, goal)
    rel = R @ (goal - pos)
    s_int = np.concatenate([rel / np.linalg.norm(rel), [np.linalg.norm(rel)], R @ vel])
    rows = []
    for t in sorted(tracks, key=lambda t: np.linalg.norm(t.position - pos)):
        r = R @ (t.position - pos)
        rows.append(np.concatenate([r / np.linalg.norm(r), [np.linalg.norm(r)], R @ t.velocity, t.dims]))
    s_dyn = np.zeros((5, 9))
    s_dyn[:len(rows)] = rows
    n_h, n_v, max_range, miss = 36, 5, 4.0, 4.1
    s_stat = np.full((n_h, n_v), miss)
    v3 = grid.view3d()
    for i in range(n_h):
        for j in range(n_v):
            az, el = 2 * np.pi * i / n_h, np.linspace(-np.pi / 6, np.pi / 6, n_v)[j]
            d = R.T @ np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
            t, vox = march_raycast(v3, grid.resolution, grid.origin, pos, d, max_range + 0.01)
            if t is None:
                continue
            lo = grid.origin + np.array(vox) * grid.resolution
            t_exact = slab_entry(pos, d, lo, lo + grid.resolution)
            if t_exact <= max_range:
                s_stat[i, j] = t_exact
    np.savez(HERE / "golden_bundle.npz", s_int=s_int, s_dyn=s_dyn, s_stat=s_stat)
    print("hits:", int(np.sum(s_stat < miss)))


if __name__ == "__main__":
    main()
