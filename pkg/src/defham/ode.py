"""Scalar-loop Dormand-Prince 5(4) for single trajectories with arbitrary vector fields.

The batched kernels in :mod:`defham.kernels` only know the built-in model
families; this integrator takes any callable and is used for truncated
flows, comparison (radial) dynamics and reference solutions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernels.tableau import A, B5, E


@dataclass
class OdeResult:
    t: float
    y: np.ndarray
    ts: np.ndarray
    ys: np.ndarray
    stopped: bool       # stop predicate fired (t is the located event time)
    collapsed: bool     # step size fell below h_min
    nsteps: int


def dopri(
    f: Callable[[np.ndarray], np.ndarray],
    y0,
    t_end: float,
    tol: float = 1e-10,
    h0: float | None = None,
    h_min: float = 0.0,
    stop: Callable[[np.ndarray], bool] | None = None,
    sample_times=None,
    max_steps: int = 10_000_000,
) -> OdeResult:
    """Integrate the autonomous system ``y' = f(y)`` from 0 to ``t_end``.

    ``sample_times`` (sorted, within [0, t_end]) are hit exactly by clipping
    steps. When ``stop(y)`` becomes true after an accepted step, the event is
    located by bisecting the length of a fresh step from the previous state.
    """
    y = np.array(y0, dtype=np.float64)
    targets = [] if sample_times is None else sorted(float(s) for s in sample_times)
    ts, ys = [], []
    ti = 0
    while ti < len(targets) and targets[ti] <= 0.0:
        ts.append(targets[ti])
        ys.append(y.copy())
        ti += 1
    t = 0.0
    h = min(h0 or t_end / 100.0, t_end) if t_end > 0 else 0.0
    k1 = f(y)
    grow_ok = True
    nsteps = 0
    while t < t_end and nsteps < max_steps:
        nxt = targets[ti] if ti < len(targets) else t_end
        remaining = nxt - t
        clip = h >= remaining
        hs = remaining if clip else h
        y5, err_vec, k7 = _step(f, y, k1, hs)
        with np.errstate(invalid="ignore", over="ignore"):
            sc = tol * (1.0 + np.maximum(np.abs(y), np.abs(y5)))
            err = float(np.max(np.abs(err_vec) / sc))
        if not np.isfinite(err):
            err = np.inf
        fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err**-0.2))
        nsteps += 1
        if err <= 1.0:
            if not grow_ok:
                fac = min(fac, 1.0)
            if stop is not None and stop(y5):
                lo, hi = 0.0, hs
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    ym, _, _ = _step(f, y, k1, mid)
                    if stop(ym):
                        hi = mid
                    else:
                        lo = mid
                ye, _, _ = _step(f, y, k1, hi)
                return OdeResult(t + hi, ye, np.array(ts), _stack(ys, y), True, False, nsteps)
            y, k1 = y5, k7
            t = nxt if clip else t + hs
            grow_ok = True
            if clip and ti < len(targets):
                ts.append(t)
                ys.append(y.copy())
                ti += 1
            if not clip:
                h = hs * fac
        else:
            grow_ok = False
            h = hs * fac
            if h < h_min:
                return OdeResult(t, y, np.array(ts), _stack(ys, y), False, True, nsteps)
    return OdeResult(t, y, np.array(ts), _stack(ys, y), False, False, nsteps)


def _stack(ys, y):
    return np.array(ys) if ys else np.zeros((0, y.shape[0]))


_A = [np.array(row) for row in A]
_B5 = np.array(B5)
_E = np.array(E)


def _step(f, y, k1, h):
    k = np.empty((7, y.shape[0]))
    k[0] = k1
    for i in range(1, 7):
        k[i] = f(y + h * (_A[i] @ k[:i]))
    return y + h * (_B5 @ k), h * (_E @ k), k[6]
