"""Time the compiled and pure-Python coordinate-descent kernels.

Runs the same penalised fits through both backends, checks they agree, and
prints per-fit timings.

    python3 benchmarks/bench_kernels.py --n 500 --d 101 --repeats 5
"""
import argparse
import time

import numpy as np

from madml import solver
from madml._backend import load_kernel


def make_problem(rng, n, d, kind):
    Z = np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])
    w = rng.uniform(0.2, 2.0, n)
    eta = Z[:, 1:4].sum(axis=1) * 0.5
    D = (rng.uniform(size=n) < 1 / (1 + np.exp(-eta))).astype(float)
    if kind == "weighted_squares":
        Y = Z[:, 1:6] @ np.ones(5) + rng.standard_normal(n)
        v = D * np.exp(-0.3 * eta)
        return solver.PenalizedProblem(kind, w, Z, outcome=Y, exp_weights=v, lam=0.05)
    return solver.PenalizedProblem(kind, w, Z, treatment=D, lam=0.1)


def time_kernel(kernel, problems, repeats):
    best = np.inf
    results = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        results = [solver.solve(p, kernel=kernel) for p in problems]
        best = min(best, time.perf_counter() - t0)
    return best / len(problems), results


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--d", type=int, default=101)
    ap.add_argument("--problems", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    try:
        compiled = load_kernel("compiled")
    except ImportError:
        compiled = None
        print("compiled kernel not built; timing the Python kernel only")
    python = load_kernel("python")

    print(f"n={args.n} d={args.d} problems={args.problems} repeats={args.repeats}")
    print(f"{'loss':32s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s} {'max |diff|':>11s}")
    for kind in ("calibrated_logistic_treated", "calibrated_logistic_control", "weighted_squares", "logistic_mle"):
        rng = np.random.default_rng(args.seed)
        problems = [make_problem(rng, args.n, args.d, kind) for _ in range(args.problems)]
        t_py, r_py = time_kernel(python, problems, args.repeats)
        if compiled is None:
            print(f"{kind:32s} {t_py * 1e3:10.2f} {'-':>12s}")
            continue
        t_c, r_c = time_kernel(compiled, problems, args.repeats)
        diff = max(float(np.max(np.abs(a.coef - b.coef))) for a, b in zip(r_py, r_c))
        print(f"{kind:32s} {t_py * 1e3:10.2f} {t_c * 1e3:12.2f} {t_py / t_c:8.1f} {diff:11.2e}")


if __name__ == "__main__":
    main()
