"""Compiled vs pure-Python kernels.

Times the two hot loops (log-sum-exp over all axes but one, per-row scalar
root finding) on Sinkhorn-sized inputs, then full Sinkhorn solves and one
reduced-Hessian evaluation on the bundled tables, under each backend.

    python3 benchmarks/bench_kernels.py [--repeat N] [--quick]
"""

import argparse
import time

import numpy as np

from otode import kernels
from otode.families import table_problem
from otode.ode import initial_potential, make_objective
from otode.sinkhorn import SinkhornConfig, sinkhorn_solve


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def micro_cases(rng):
    X2 = rng.normal(size=(100, 200))
    X3 = rng.normal(size=(99, 99, 99))
    F = rng.normal(size=(100, 200))
    F -= F.mean(axis=1, keepdims=True)  # a sign change in every row
    return [
        ("lse 100x200 axis 0", lambda: kernels.logsumexp_keep(X2, 0)),
        ("lse 99^3 axis 1", lambda: kernels.logsumexp_keep(X3, 1)),
        ("lse 99^3 axes (0,1)", lambda: kernels.logsumexp_keep(X3, (0, 1))),
        ("root_rows 100x200", lambda: kernels.root_rows(X2, F)),
    ]


def solver_cases(quick):
    names = ["table1", "table4"] if quick else ["table1", "table2", "table4", "table5"]
    cases = []
    for name in names:
        p = table_problem(name)
        cfg = SinkhornConfig(tol=1e-6)
        cases.append((f"sinkhorn {name}", lambda p=p, cfg=cfg: sinkhorn_solve(p, 1.0, cfg)))
        obj = make_objective(p)
        x0 = initial_potential(p, obj)

        def hess(obj=obj, x0=x0):
            obj._memo = None  # defeat memoization so each call recomputes
            obj.hessian(x0, 0.5)
        cases.append((f"hessian {name}", hess))
    return cases


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled extension not built; only", backends, "available")
    rng = np.random.default_rng(0)
    cases = micro_cases(rng) + solver_cases(args.quick)
    previous = kernels.BACKEND
    rows = []
    try:
        for label, fn in cases:
            times = {}
            for b in backends:
                kernels.use_backend(b)
                fn()  # warm up
                times[b] = _best(fn, args.repeat)
            rows.append((label, times))
    finally:
        kernels.use_backend(previous)

    print(f"{'case':28s}" + "".join(f"{b:>12s}" for b in backends) + "   speedup")
    for label, t in rows:
        line = f"{label:28s}" + "".join(f"{1e3 * t[b]:10.2f}ms" for b in backends)
        if "cython" in t:
            line += f"   {t['python'] / t['cython']:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
