"""Time the numba kernels against their numpy twins and check they agree.

Usage: python benchmarks/bench_kernels.py [--paths N] [--steps N] [--tree N] [--repeat N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from skinn import kernels
from skinn._accel import HAVE_NUMBA


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=250)
    ap.add_argument("--tree", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    z = np.random.default_rng(0).standard_normal((args.steps, 2, args.paths))
    sv_args = (100.0, 0.04, 0.02, 2.0, 0.04, 0.5, -0.7, 0.5, 1.0 / args.steps, z)
    tree_args = (100.0, 100.0, 0.02, 1.0, 0.2, args.tree)

    rows = []
    ref_sv, _ = kernels.sv_terminal_numpy(*sv_args)
    ref_tree = kernels.crr_call_numpy(*tree_args)
    rows.append(("sv_terminal", "numpy", best_of(lambda: kernels.sv_terminal_numpy(*sv_args), args.repeat), 0.0))
    rows.append(("crr_call", "numpy", best_of(lambda: kernels.crr_call_numpy(*tree_args), args.repeat), 0.0))
    if HAVE_NUMBA:
        kernels.sv_terminal(*sv_args)  # compile
        kernels.crr_call(*tree_args)
        out, _ = kernels.sv_terminal(*sv_args)
        rows.append(("sv_terminal", "numba", best_of(lambda: kernels.sv_terminal(*sv_args), args.repeat),
                     float(np.max(np.abs(out - ref_sv) / ref_sv))))
        rows.append(("crr_call", "numba", best_of(lambda: kernels.crr_call(*tree_args), args.repeat),
                     abs(kernels.crr_call(*tree_args) - ref_tree) / ref_tree))
    else:
        print("numba disabled (SKINN_NUMBA=0 or not installed): numpy rows only")

    print(f"{'kernel':<12} {'backend':<7} {'seconds':>9} {'max rel diff':>13}")
    for name, backend, secs, diff in rows:
        print(f"{name:<12} {backend:<7} {secs:9.4f} {diff:13.2e}")


if __name__ == "__main__":
    main()
