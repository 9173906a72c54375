"""Wall-clock comparison of the numba and numpy backward-induction kernels.

    python3 benchmarks/bench_kernels.py --sizes 100 200 400 --repeat 3
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from crbsde import ConstraintSpec, GeneratorSpec, MarketModel, ObstacleSpec, TerminalPayoff, TimeGrid, build_lattice
from crbsde.solver import solve_penalized

CASES = {
    "plain": dict(cons=None, n=0.0, obstacle=False),
    "constrained": dict(cons=ConstraintSpec(((0.0, None),)), n=math.inf, obstacle=True),
    "union": dict(cons=ConstraintSpec(((None, -0.2), (0.05, 0.1), (0.3, None))), n=64.0, obstacle=True),
}


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 200, 400, 800])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    market = MarketModel(x0=1.0, mu_drift=0.08, sigma=0.2, r=0.05)
    gen = GeneratorSpec.linear_wealth(market.r, market.mu_drift, market.sigma)
    X = TerminalPayoff.put(1.0)
    put = ObstacleSpec.lower(lambda t, x: np.maximum(1.0 - x, 0.0))

    print(f"{'case':12s} {'N':>6s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s} {'max diff':>9s}")
    for name, c in CASES.items():
        for N in args.sizes:
            lat = build_lattice(TimeGrid(1.0, N), market)
            ob = put if c["obstacle"] else None

            def run(backend):
                return solve_penalized(X, gen, c["cons"], c["n"], ob, math.inf, lat, backend=backend)

            a, b = run("numba"), run("numpy")  # warm up, and check they agree
            diff = float(np.max(np.abs(a.y.values - b.y.values)))
            tn = best_of(lambda: run("numba"), args.repeat)
            tp = best_of(lambda: run("numpy"), args.repeat)
            print(f"{name:12s} {N:6d} {tn:10.4f} {tp:10.4f} {tp / tn:8.1f} {diff:9.1e}")


if __name__ == "__main__":
    main()
