"""Timing comparison of the two kernel backends on realistic shapes.

Calls the numpy and compiled implementations directly (bypassing the
VOXOCC_NUMBA dispatch) so both run in one process on identical inputs.
Label-producing kernels report the count of disagreeing cells instead of a
max difference: ties at cell or pixel boundaries may legitimately resolve
differently between backends.

Run:  python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from voxocc.geometry import VoxelGridSpec, make_ring_rig
from voxocc.kernels import numpy_impl
from voxocc.synth import SceneSpec, ground_box_for, sample_boxes
from voxocc.view_transform import build_view_transform

try:
    from voxocc.kernels import numba_impl
except ImportError:
    numba_impl = None


def _timeit(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases():
    rng = np.random.default_rng(np.random.PCG64(0))
    grid = VoxelGridSpec(-10.0, 10.0, -10.0, 10.0, -2.0, 2.0, 40, 40, 8)
    rig = make_ring_rig(6, 1.0, 0.5, 10.0, 100.0, 128, 128)

    c = 32
    feat3 = rng.standard_normal((c, 40, 40, 8)).astype(np.float32)
    coords3 = rng.uniform(0.0, 7.0, (12800, 3)).astype(np.float32)
    gout3 = rng.standard_normal((12800, c)).astype(np.float32)
    feat2 = rng.standard_normal((c, 128, 128)).astype(np.float32)
    coords2 = rng.uniform(0.0, 100.0, (9600, 2)).astype(np.float32)
    gout2 = rng.standard_normal((9600, c)).astype(np.float32)

    vt = build_view_transform(rig, grid, n_levels=1).levels[0].local
    x = rng.standard_normal((vt.shape[1], c)).astype(np.float32)
    g = rng.standard_normal((vt.shape[0], c)).astype(np.float32)

    src = rng.standard_normal((20000, c)).astype(np.float32)
    idx = rng.integers(0, 12800, 20000).astype(np.int64)

    spec = SceneSpec(seed=3, min_objects=8, max_objects=8)
    boxes = [ground_box_for(grid)] + sample_boxes(
        spec, np.random.default_rng(np.random.PCG64(3)))
    centers = np.stack([b.center for b in boxes]).astype(np.float32)
    sizes = np.stack([b.size for b in boxes]).astype(np.float32)
    yaws = np.array([b.yaw for b in boxes], dtype=np.float32)
    classes = np.array([b.class_id for b in boxes], dtype=np.int32)
    mins = np.array(grid.mins, dtype=np.float32)
    cells = np.array(grid.cell_sizes, dtype=np.float32)
    dims = np.array(grid.dims, dtype=np.int64)

    from voxocc.synth import BACKGROUND, PALETTE, SHADE_SCALE
    origin, dirs = rig.cameras[0].ray_grid()
    origin = origin.astype(np.float32)
    dirs = dirs.astype(np.float32)

    return [
        ("trilinear_forward", (feat3, coords3, False), "float"),
        ("trilinear_backward", (feat3, coords3, gout3, False), "float"),
        ("bilinear_forward", (feat2, coords2, False), "float"),
        ("bilinear_backward", (feat2, coords2, gout2, False), "float"),
        ("csr_matvec", (vt.indptr, vt.indices, vt.data, x), "float"),
        ("csr_matvec_t", (vt.indptr, vt.indices, vt.data, g, vt.shape[1]),
         "float"),
        ("scatter_add_rows", (src, idx, 12800), "float"),
        ("rasterize_boxes", (centers, sizes, yaws, classes, mins, cells,
                             dims), "labels"),
        ("render_scene", (origin, dirs, centers, sizes, yaws, classes,
                          PALETTE, BACKGROUND, np.float32(SHADE_SCALE)),
         "pixels"),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    cases = build_cases()
    header = (f"{'kernel':<20} {'numpy':>10} {'compiled':>10} "
              f"{'speedup':>8}  agreement")
    print(header)
    print("-" * len(header))
    for name, fargs, kind in cases:
        ref_fn = getattr(numpy_impl, name)
        ref = ref_fn(*fargs)
        t_np = _timeit(ref_fn, fargs, args.repeat)
        if numba_impl is None:
            print(f"{name:<20} {t_np * 1e3:>8.2f}ms {'-':>10} {'-':>8}  "
                  f"compiled backend unavailable")
            continue
        fn = getattr(numba_impl, name)
        out = fn(*fargs)  # first call compiles
        t_nb = _timeit(fn, fargs, args.repeat)
        ref_t = ref if isinstance(ref, tuple) else (ref,)
        out_t = out if isinstance(out, tuple) else (out,)
        if kind == "labels":
            n_diff = int((ref_t[0] != out_t[0]).sum())
            agree = f"{n_diff} cells differ (boundary ties)"
        else:
            worst = max(float(np.abs(r.astype(np.float64)
                                     - o.astype(np.float64)).max())
                        for r, o in zip(ref_t, out_t))
            agree = f"max |diff| {worst:.2e}"
            if kind == "pixels":
                n_diff = int((np.abs(ref_t[0] - out_t[0]) > 1e-5)
                             .any(axis=-1).sum())
                agree += f", {n_diff} pixels differ"
        print(f"{name:<20} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.1f}x  {agree}")


if __name__ == "__main__":
    main()
