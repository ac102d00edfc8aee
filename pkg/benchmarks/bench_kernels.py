"""Numba vs numpy timings for the geometric kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Sizes follow the evaluation workload: 60 frames, 52 joints, 512 object
points per frame. Each kernel is called once before timing so numba
compilation is excluded. Outputs are checked to agree before timing.
"""

import argparse
import json
import time

import numpy as np

from lighthoi import kernels


def cases(rng):
    T, J, V = 60, 52, 512
    joints = rng.normal(size=(T, J, 3))
    verts = rng.normal(size=(T, V, 3))
    q = rng.normal(size=(T * V, 3))
    pts = rng.normal(size=(2048, 3))
    radii = rng.uniform(0.01, 0.1, J)
    a, b = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    return {
        "min_dist": (q[:4096], pts),
        "min_dist_argmin": (q[:4096], pts),
        "frame_min_dist": (joints, verts),
        "spheres_sdf": (q, joints[0], radii),
        "capsules_sdf": (q, a, b, radii[:16]),
        "frame_spheres_sdf": (verts, joints, radii),
    }


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json")
    args = ap.parse_args()

    rows = []
    for name, inputs in cases(np.random.default_rng(args.seed)).items():
        ref, fast = kernels.NUMPY[name](*inputs), kernels.NUMBA[name](*inputs)
        for r, f in zip(np.atleast_1d(ref) if not isinstance(ref, tuple) else ref,
                        np.atleast_1d(fast) if not isinstance(fast, tuple) else fast):
            np.testing.assert_allclose(f, r, rtol=1e-10, atol=1e-12)
        t_np = best_of(kernels.NUMPY[name], inputs, args.repeat)
        t_nb = best_of(kernels.NUMBA[name], inputs, args.repeat)
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})

    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['numpy_ms']:>12.3f}{r['numba_ms']:>12.3f}{r['speedup']:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
