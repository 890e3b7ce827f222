"""Compare the numba and numpy kernel backends on the two hot loops.

Usage::

    python benchmarks/bench_backends.py [--sizes 500 2000 8000] [--repeat 3] [--threads 1]

For each particle count the script times one interaction-field query at
every particle and one frozen-field step of the batched integrator, checks
that both backends agree, and prints a table of best-of-``repeat`` wall
times. The numba column is skipped when numba is unavailable or disabled
through ``DEFHAM_DISABLE_NUMBA``.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from defham import kernels
from defham.model import BumpKernel, PowerPotential


def _best(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _case(n, d, rng):
    q = rng.normal(0.0, 0.5 * n ** (1.0 / d) / 4.0, (n, d))
    p = rng.normal(0.0, 1.0, (n, d))
    w = np.full(n, 1.0 / n)
    kern = BumpKernel(1.0, 0.5)
    grid = kernels.build_grid(q, w, kern.a)
    pp = PowerPotential(1.0, -0.01, 4.0).params(d)
    return p, q, grid, kern.kind, kern.params, pp


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[500, 2000, 8000])
    ap.add_argument("--d", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--dt", type=float, default=0.05)
    args = ap.parse_args(argv)

    kernels.set_threads(args.threads)
    backends = {"numpy": kernels.numpy_backend}
    if kernels.numba_backend is not None:
        backends["numba"] = kernels.numba_backend
    rng = np.random.default_rng(0)

    # compile once outside the timings
    if "numba" in backends:
        p, q, grid, kind, kp, pp = _case(50, args.d, rng)
        backends["numba"].field_query(q, grid, kind, kp)
        backends["numba"].advance(p, q, np.zeros(50), np.ones(50, bool), args.dt, 1e-10, 1e6,
                                  1e-12, np.full(50, args.dt), grid, kind, kp, pp)

    names = list(backends)
    head = f"{'N':>7} {'kernel':>8} " + " ".join(f"{nm + ' [s]':>12}" for nm in names)
    if len(names) == 2:
        head += f" {'speedup':>8} {'max diff':>10}"
    print(head)
    for n in args.sizes:
        p, q, grid, kind, kp, pp = _case(n, args.d, rng)
        jobs = {
            "field": lambda b: b.field_query(q, grid, kind, kp),
            "advance": lambda b: b.advance(p, q, np.zeros(n), np.ones(n, bool), args.dt, 1e-10,
                                           1e6, 1e-12, np.full(n, args.dt), grid, kind, kp, pp),
        }
        for label, job in jobs.items():
            times, outs = [], []
            for nm in names:
                t, out = _best(lambda: job(backends[nm]), args.repeat)
                times.append(t)
                outs.append(out)
            row = f"{n:>7d} {label:>8} " + " ".join(f"{t:>12.4f}" for t in times)
            if len(names) == 2:
                diff = max(float(np.max(np.abs(a - b))) for a, b in zip(outs[0][:2], outs[1][:2]))
                row += f" {times[0] / times[1]:>8.1f} {diff:>10.1e}"
            print(row)


if __name__ == "__main__":
    main()
