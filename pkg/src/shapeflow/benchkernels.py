"""Benchmark the numba kernels against their pure-numpy fallbacks.

Covers the hot geometry loops: farthest point sampling, grid ray marching,
and mesh raycasting. Results print as a table and optionally land in a CSV.
"""

import csv
import time

import numpy as np

from .accel import HAS_NUMBA
from .geometry.sampling import _fps_numba, _fps_numpy
from .render import (
    _march_field_np,
    _march_grid_numba,
    _raycast_mesh_np,
    _raycast_mesh_numba,
    GridField,
    camera_preset,
)


def _time(fn, reps=3):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_kernel_bench(n_points=20000, k=512, grid_res=64, resolution=128, n_tris=4000,
                     reps=3, seed=0):
    rng = np.random.default_rng(seed)
    rows = []

    pts = rng.uniform(-1, 1, (n_points, 3))
    if HAS_NUMBA:
        _fps_numba(pts[:64], 8, 0)  # compile
        rows.append(("fps", "numba", _time(lambda: _fps_numba(pts, k, 0), reps)))
    rows.append(("fps", "numpy", _time(lambda: _fps_numpy(pts, k, 0), reps)))

    lin = np.linspace(-1, 1, grid_res)
    x, y, z = np.meshgrid(lin, lin, lin, indexing="ij")
    grid = (np.sqrt(x**2 + y**2 + z**2) - 0.5).astype(np.float32)
    cam = camera_preset("front", resolution=(resolution, resolution))
    origins, dirs = cam.rays()
    if HAS_NUMBA:
        _march_grid_numba(grid, -1.0, 1.0, origins[:16], dirs[:16], 192, 1e-3, 0.9)
        rows.append(("grid_march", "numba",
                     _time(lambda: _march_grid_numba(grid, -1.0, 1.0, origins, dirs,
                                                     192, 1e-3, 0.9), reps)))
    gfield = GridField(grid)
    rows.append(("grid_march", "numpy",
                 _time(lambda: _march_field_np(gfield, origins, dirs, 192, 1e-3, 0.9, 6.0),
                       reps)))

    v = rng.uniform(-0.6, 0.6, (n_tris * 3, 3))
    tris = np.arange(n_tris * 3, dtype=np.int64).reshape(-1, 3)
    v0 = np.ascontiguousarray(v[tris[:, 0]])
    e1 = np.ascontiguousarray(v[tris[:, 1]] - v[tris[:, 0]])
    e2 = np.ascontiguousarray(v[tris[:, 2]] - v[tris[:, 0]])
    if HAS_NUMBA:
        _raycast_mesh_numba(v0[:8], e1[:8], e2[:8], origins[:8], dirs[:8])
        rows.append(("mesh_raycast", "numba",
                     _time(lambda: _raycast_mesh_numba(v0, e1, e2, origins, dirs), reps)))
    rows.append(("mesh_raycast", "numpy",
                 _time(lambda: _raycast_mesh_np(v0, e1, e2, origins, dirs), reps)))
    return rows


def format_kernel_bench(rows):
    lines = [f"{'kernel':<14} {'backend':<8} {'median_s':>10}  speedup"]
    by_kernel = {}
    for kernel, backend, t in rows:
        by_kernel.setdefault(kernel, {})[backend] = t
    for kernel, backend, t in rows:
        ref = by_kernel[kernel].get("numpy")
        speed = f"{ref / t:7.1f}x" if ref and backend == "numba" else "      -"
        lines.append(f"{kernel:<14} {backend:<8} {t:10.5f}  {speed}")
    return "\n".join(lines)


def write_kernel_bench_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel", "backend", "median_s"])
        for kernel, backend, t in rows:
            writer.writerow([kernel, backend, f"{t:.6f}"])
