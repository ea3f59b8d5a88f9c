"""Compare the compiled block kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--frames 50 200 1000] [--rank 3] [--repeat 50]

Each kernel is timed on identical random inputs with both backends, the
outputs are checked for agreement, and one row per (kernel, N) is printed.
A final section times a full staircase solve under each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from certba import kernels
from certba.manifold import FactorPoint


def make_inputs(n, r, rng):
    pt = FactorPoint.random(n, r, rng)
    R = np.ascontiguousarray(pt.stiefel)
    s = np.ascontiguousarray(pt.scales)
    A = rng.standard_normal((n, r, 3))
    xi = kernels.py.project_tangent(R, A)
    m = 20 * n
    frames = rng.integers(0, n, m).astype(np.int64)
    pts = rng.standard_normal((m, 3))
    w = rng.uniform(0.5, 2.0, m)
    return {
        "project_tangent": (R, A),
        "weingarten": (R, s, A, xi),
        "retract": (R, s, 0.1 * xi, 1.0),
        "dual_blocks": (R, s, A),
        "frame_moments": (frames, pts, w, n),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def bench_kernels(sizes, rank, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'N':>6} {'numpy us':>10} {'cython us':>10} {'speedup':>8} {'max diff':>10}")
    for n in sizes:
        inputs = make_inputs(n, rank, rng)
        for name, args in inputs.items():
            f_py = getattr(kernels.py, name)
            f_ext = getattr(kernels.ext, name)
            diff = max_diff(f_py(*args), f_ext(*args))
            t_py = min(timeit.repeat(lambda: f_py(*args), number=repeat, repeat=3)) / repeat
            t_ext = min(timeit.repeat(lambda: f_ext(*args), number=repeat, repeat=3)) / repeat
            print(f"{name:<16} {n:>6} {t_py * 1e6:>10.1f} {t_ext * 1e6:>10.1f} {t_py / t_ext:>8.2f} {diff:>10.1e}")


SOLVE_SNIPPET = """
import time
from certba import BACKEND
from certba.viewgraph import synth_scene
from certba.pipeline import solve_graph
g, _ = synth_scene({n}, {m}, visibility_prob=0.3, noise_eps=0.5, seed=1)
solve_graph(g)
t = time.perf_counter()
sol = solve_graph(g)
print(BACKEND, time.perf_counter() - t, sol.objective)
"""


def bench_solve(n, m):
    print(f"\nend-to-end solve, N={n} M={m} eps=0.5")
    for pure in ("0", "1"):
        env = dict(os.environ, CERTBA_PURE_PYTHON=pure)
        out = subprocess.run(
            [sys.executable, "-c", SOLVE_SNIPPET.format(n=n, m=m)],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        ).stdout.split()
        print(f"  backend={out[0]:<7} seconds={float(out[1]):.3f} objective={float(out[2]):.10g}")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--frames", type=int, nargs="+", default=[50, 200, 1000])
    parser.add_argument("--rank", type=int, default=3)
    parser.add_argument("--repeat", type=int, default=50)
    parser.add_argument("--solve-frames", type=int, default=100)
    parser.add_argument("--solve-landmarks", type=int, default=1000)
    args = parser.parse_args(argv)
    if kernels.ext is None:
        print("compiled extension not available; build with `pip install --no-build-isolation -e .`")
        return 1
    bench_kernels(args.frames, args.rank, args.repeat)
    bench_solve(args.solve_frames, args.solve_landmarks)
    return 0


if __name__ == "__main__":
    sys.exit(main())
