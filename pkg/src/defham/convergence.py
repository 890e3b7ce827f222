"""Verification harness for the two limits of the scheme.

``n -> infinity``: paired-trajectory closeness and weak-form residuals.
``eps -> 0``: mass curves over an epsilon sweep, Richardson extrapolation
of the limit mass and its monotonicity in time.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .flow import FlowConfig, RunRecord, _fmt, evolve
from .model import HamiltonianModel, velocity
from .phase_space import ParticleMeasure, SpatialBump, integrate


def _representation_sums(record: RunRecord, phi, eps: float, j: int) -> float:
    """Sum over the time-0 particle list of ``w0 exp(-eps S_t) phi(X_t)`` (survivors only)."""
    idx = np.nonzero(~record.escaped[j])[0]
    if idx.size == 0:
        return 0.0
    x = np.concatenate([record.P[j, idx], record.Q[j, idx]], axis=1)
    vals = np.asarray(phi(x), dtype=np.float64).reshape(-1)
    return float(np.sum(record.w0[idx] * np.exp(-eps * record.S[j, idx]) * vals))


def representation_check(record: RunRecord, phis: Sequence[Callable], eps: float | None = None,
                         mode: str = "bookkeeping", mu0: ParticleMeasure | None = None,
                         model: HamiltonianModel | None = None, ref_tol: float | None = None,
                         substeps: int = 1) -> float:
    """Largest discrepancy of the representation formula over test functions and sample times.

    ``mode="bookkeeping"`` compares the per-particle sum against
    :func:`integrate` on the stored measure. ``mode="reintegrate"`` reruns
    the same scheme with ``ref_tol`` (default ``ode_tol/100``) and compares
    the two per-particle sums, which bounds the integrator error.
    """
    eps = record.cfg.eps if eps is None else eps
    worst = 0.0
    if mode == "bookkeeping":
        for j in range(record.sample_times.size):
            mu = record.measure(j)
            for phi in phis:
                a = _representation_sums(record, phi, eps, j)
                b = integrate(mu, phi, eps)
                worst = max(worst, abs(a - b))
        return worst
    if mode != "reintegrate":
        raise ValueError(f"unknown mode {mode!r}")
    if mu0 is None or model is None:
        raise ValueError("reintegrate mode needs mu0 and model")
    tol = record.cfg.ode_tol / 100.0 if ref_tol is None else ref_tol
    ref = evolve(mu0, model, replace(record.cfg, ode_tol=tol), substeps=substeps)
    m = min(ref.sample_times.size, record.sample_times.size)
    for j in range(m):
        for phi in phis:
            a = _representation_sums(record, phi, eps, j)
            b = _representation_sums(ref, phi, eps, j)
            worst = max(worst, abs(a - b))
    return worst


@dataclass(frozen=True)
class TimeWindow:
    """``chi(t) = sin^2(pi (t - t0) / (t1 - t0))`` on [t0, t1], zero outside (C^1)."""

    t0: float
    t1: float

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("window needs t1 > t0")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        s = (t - self.t0) / (self.t1 - self.t0)
        inside = (s >= 0) & (s <= 1)
        return np.where(inside, np.sin(np.pi * s) ** 2, 0.0)

    def deriv(self, t):
        t = np.asarray(t, dtype=np.float64)
        L = self.t1 - self.t0
        s = (t - self.t0) / L
        inside = (s >= 0) & (s <= 1)
        return np.where(inside, np.pi / L * np.sin(2.0 * np.pi * s), 0.0)


def weak_residual(record: RunRecord, model: HamiltonianModel, phi: SpatialBump,
                  window: TimeWindow, eps: float | None = None) -> float:
    """``|int int (d_t psi + <v, grad psi> - eps |v| psi) dmu_t dt|`` with ``psi = chi(t) phi(x)``.

    The velocity at each sample is the mean-field velocity of the sampled
    measure; the time integral is the trapezoid rule on the sample grid.
    """
    eps = record.cfg.eps if eps is None else eps
    ts = record.sample_times
    inside = (ts >= window.t0) & (ts <= window.t1)
    if inside.sum() < 20:
        raise ValueError(f"only {int(inside.sum())} samples inside the window; need >= 20")
    vals = np.zeros(ts.size)
    chi, dchi = window(ts), window.deriv(ts)
    for j in range(ts.size):
        if chi[j] == 0.0 and dchi[j] == 0.0:
            continue
        mu = record.measure(j)
        keep = ~mu.escaped
        if not keep.any():
            continue
        x = mu.x[keep]
        w = mu.weights(eps)[keep]
        f = phi(x)
        near = f != 0.0
        if not near.any():
            continue
        x, w, f = x[near], w[near], f[near]
        v = velocity(model, mu, x, eps)
        g = phi.grad(x)
        transport = np.einsum("ij,ij->i", v, g)
        sink = np.linalg.norm(v, axis=1) * f
        vals[j] = dchi[j] * np.sum(w * f) + chi[j] * np.sum(w * (transport - eps * sink))
    return float(abs(trapezoid(vals, ts)))


@dataclass
class Closeness:
    deviation: float
    cohort: int
    empty: bool


def paired_deviation(coarse: RunRecord, fine: RunRecord, L: float, t: float) -> Closeness:
    """Sup over shared sample times <= t of |X^coarse - X^fine| for particles whose
    fine-run path stays in the phase-space ball of radius ``L`` up to ``t``."""
    tc, tf = coarse.sample_times, fine.sample_times
    jc, jf = [], []
    for a, s in enumerate(tc):
        if s > t + 1e-12:
            break
        b = int(np.argmin(np.abs(tf - s)))
        if abs(tf[b] - s) <= 1e-9 * max(1.0, abs(s)):
            jc.append(a)
            jf.append(b)
    mf = np.searchsorted(tf, t + 1e-12)
    xf = np.concatenate([fine.P[:mf], fine.Q[:mf]], axis=2)
    stay = np.all(~fine.escaped[:mf], axis=0) & np.all(np.linalg.norm(xf, axis=2) <= L, axis=0)
    stay &= ~np.any(coarse.escaped[jc], axis=0)
    idx = np.nonzero(stay)[0]
    if idx.size == 0:
        return Closeness(0.0, 0, True)
    xc = np.concatenate([coarse.P[jc][:, idx], coarse.Q[jc][:, idx]], axis=2)
    xfi = np.concatenate([fine.P[jf][:, idx], fine.Q[jf][:, idx]], axis=2)
    dev = float(np.max(np.linalg.norm(xc - xfi, axis=2)))
    return Closeness(dev, int(idx.size), False)


def trajectory_closeness(model: HamiltonianModel, mu0: ParticleMeasure, cfg: FlowConfig, n1: int,
                         n2: int, L: float, t: float) -> Closeness:
    if not n1 < n2:
        raise ValueError("need n1 < n2")
    r1 = evolve(mu0, model, replace(cfg, n=n1))
    r2 = evolve(mu0, model, replace(cfg, n=n2))
    return paired_deviation(r1, r2, L, t)


@dataclass(frozen=True)
class SweepPlan:
    eps: tuple
    n: tuple
    probe_times: tuple
    T: float = 1.0
    ode_tol: float = 1e-10
    X_max: float = 1e6
    h_min: float | None = None
    substeps: int = 1
    seed: int = 0

    def __post_init__(self):
        errs = self.validate()
        if errs:
            raise ValueError("; ".join(errs))

    def validate(self) -> list[str]:
        errs = []
        if not self.eps:
            errs.append("eps list is empty")
        elif any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            errs.append("eps list is not strictly decreasing")
        if not self.n:
            errs.append("n list is empty")
        elif any(b <= a for a, b in zip(self.n, self.n[1:])):
            errs.append("n list is not strictly increasing")
        if not self.probe_times:
            errs.append("probe time list is empty")
        elif any(t <= 0 or t > self.T for t in self.probe_times):
            errs.append("probe times must lie in (0, T]")
        return errs

    def config(self, eps: float, n: int | None = None) -> FlowConfig:
        return FlowConfig(eps=eps, T=self.T, n=self.n[-1] if n is None else n,
                          ode_tol=self.ode_tol, X_max=self.X_max, h_min=self.h_min, seed=self.seed)


def richardson(m_prev: float, m_last: float, e_prev: float, e_last: float):
    """Linear-in-eps extrapolation to 0 from the last two points and its error estimate."""
    limit = m_last + (m_last - m_prev) * e_last / (e_prev - e_last)
    return limit, abs(m_last - m_prev)


@dataclass
class MassReport:
    eps: np.ndarray
    times: np.ndarray
    masses: np.ndarray               # (len(times), len(eps))
    limit: np.ndarray
    error: np.ndarray
    differences: np.ndarray          # (len(times), len(eps) - 1)
    shrinking: np.ndarray            # per time: successive differences decrease
    monotone_in_t: np.ndarray        # per eps: masses nonincreasing in t
    first_escape: float = math.inf
    records: list = field(default_factory=list, repr=False)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t"] + [f"eps={_fmt(e)}" for e in self.eps] + ["limit", "error", "shrinking"])
        for k, t in enumerate(self.times):
            wr.writerow([_fmt(t)] + [_fmt(m) for m in self.masses[k]]
                        + [_fmt(self.limit[k]), _fmt(self.error[k]), str(bool(self.shrinking[k]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        return {
            "eps": [float(e) for e in self.eps],
            "times": [float(t) for t in self.times],
            "limit": [float(v) for v in self.limit],
            "error": [float(v) for v in self.error],
            "not_shrinking_at": [float(t) for t, ok in zip(self.times, self.shrinking) if not ok],
            "first_escape": None if math.isinf(self.first_escape) else float(self.first_escape),
            "note": "fixed geometric eps sequence; a non-shrinking difference cannot tell a "
                    "discontinuity of the limit from a bad subsequence",
        }


def sample_mass(record: RunRecord, t: float, eps: float | None = None) -> float:
    """Decayed mass at sample time ``t`` (must be on the sample grid)."""
    eps = record.cfg.eps if eps is None else eps
    j = record.grid_index(t)
    if abs(record.sample_times[j] - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"probe time {t!r} is not on the sample grid")
    alive = ~record.escaped[j]
    return float(np.sum(record.w0[alive] * np.exp(-eps * record.S[j, alive])))


def mass_in_ball(record: RunRecord, t: float, L: float, eps: float | None = None) -> float:
    """Decayed mass inside the phase-space ball of radius ``L`` at sample time ``t``."""
    eps = record.cfg.eps if eps is None else eps
    j = record.grid_index(t)
    alive = ~record.escaped[j]
    r = np.linalg.norm(np.concatenate([record.P[j], record.Q[j]], axis=1), axis=1)
    keep = alive & (r <= L)
    return float(np.sum(record.w0[keep] * np.exp(-eps * record.S[j, keep])))


def build_mass_report(eps, times, records: Sequence[RunRecord]) -> MassReport:
    eps = np.asarray(eps, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    masses = np.array([[sample_mass(rec, t, e) for e, rec in zip(eps, records)] for t in times])
    if eps.size >= 2:
        lim_err = [richardson(m[-2], m[-1], eps[-2], eps[-1]) for m in masses]
        limit = np.array([le[0] for le in lim_err])
        error = np.array([le[1] for le in lim_err])
    else:
        limit, error = masses[:, -1].copy(), np.full(times.size, np.nan)
    diffs = np.abs(np.diff(masses, axis=1))
    shrinking = np.array([bool(np.all(np.diff(row) < 0)) if row.size > 1 else True for row in diffs])
    mono = np.array([bool(np.all(np.diff(masses[:, k]) <= 0)) for k in range(eps.size)])
    esc = [float(np.min(r.t_escape[np.isfinite(r.t_escape)])) for r in records
           if np.any(np.isfinite(r.t_escape))]
    first = min(esc) if esc else math.inf
    return MassReport(eps, times, masses, limit, error, diffs, shrinking, mono, first, list(records))


def epsilon_sweep(plan: SweepPlan, mu0: ParticleMeasure, model: HamiltonianModel,
                  threads: int = 1) -> MassReport:
    """Evolve once per eps at the finest n of the plan and tabulate masses at the probes."""

    def job(e):
        rec = evolve(mu0, model, plan.config(e), substeps=plan.substeps)
        if rec.error is not None:
            raise RuntimeError(f"run with eps={e!r} failed: {rec.error}")
        return rec

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(job, plan.eps))
    else:
        records = [job(e) for e in plan.eps]
    return build_mass_report(plan.eps, plan.probe_times, records)


@dataclass
class MonotonicityAudit:
    ok: bool
    slack: np.ndarray        # allowed rise minus actual rise, per interval
    failures: list


def limit_mass_monotonicity(report: MassReport) -> MonotonicityAudit:
    """Extrapolated limit mass must be nonincreasing in t within twice the error estimate."""
    if report.times.size < 3:
        raise ValueError("need at least 3 probe times")
    lim, err = report.limit, np.nan_to_num(report.error, nan=0.0)
    rise = np.diff(lim)
    allowed = 2.0 * np.maximum(err[:-1], err[1:]) + 1e-12
    slack = allowed - rise
    fails = [(float(report.times[k]), float(report.times[k + 1])) for k in np.nonzero(slack < 0)[0]]
    return MonotonicityAudit(not fails, slack, fails)
