"""Deficient characteristic flow and the frozen-field time discretisation.

Over each interval [kh, (k+1)h) the velocity field is computed once from
the ensemble at time kh and held fixed; every alive particle is then
integrated under it with an adaptive Dormand-Prince 5(4) stepper whose
state carries one extra component, the path length S with S' = |x'|.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .model import HamiltonianModel, field_grid, hamiltonian_energy
from .ode import dopri
from .phase_space import ParticleMeasure, PhasePoint, exp_moment, total_mass

BOUNDED = math.inf  # escape_time sentinel: no escape before the horizon


class NonFinite(ArithmeticError):
    def __init__(self, index: int, t: float):
        super().__init__(f"non-finite state for particle {index} near t={t:g}")
        self.index = index
        self.t = t


@dataclass(frozen=True)
class FlowConfig:
    eps: float = 0.0
    T: float = 1.0
    n: int = 10
    ode_tol: float = 1e-10
    X_max: float = 1e6
    h_min: float | None = None
    seed: int = 0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errs = []
        if not self.eps >= 0:
            errs.append("flow.eps must be >= 0")
        if not self.T > 0:
            errs.append("flow.T must be > 0")
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            errs.append("flow.n must be a positive integer")
        if not self.ode_tol > 0:
            errs.append("flow.ode_tol must be > 0")
        if not self.X_max > 0:
            errs.append("flow.X_max must be > 0")
        if self.h_min is not None and not self.h_min > 0:
            errs.append("flow.h_min must be > 0")
        if not errs and not self.h > self.hmin:
            errs.append("scheme step T/n must exceed flow.h_min")
        return errs

    @property
    def h(self) -> float:
        return self.T / self.n

    @property
    def hmin(self) -> float:
        return self.h_min if self.h_min is not None else 1e-12 * self.T


@dataclass
class FrozenField:
    """Velocity field computed from a snapshot and held fixed over one scheme step."""

    model: HamiltonianModel
    grid: kernels.CellGrid

    @classmethod
    def from_measure(cls, model: HamiltonianModel, mu: ParticleMeasure | None, eps: float):
        if mu is None or model.kernel.kind == 0:
            mu = ParticleMeasure.empty(model.d)
        return cls(model, field_grid(model, mu, eps))

    def force(self, q):
        """grad(Phi + W*mu) at rows of ``q``."""
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        g = self.model.potential.grad(q)
        if self.model.kernel.kind:
            _, gf = kernels.field_query(q, self.grid, self.model.kernel.kind, self.model.kernel.params)
            g = g + gf
        return g

    def velocity(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = self.model.d
        return np.hstack([-self.force(x[:, d:]), x[:, :d]])


@dataclass
class Trajectory:
    times: np.ndarray
    p: np.ndarray
    q: np.ndarray
    S: np.ndarray
    escaped: bool = False
    t_escape: float = math.nan

    @property
    def x(self) -> np.ndarray:
        return np.hstack([self.p, self.q])

    def radius(self) -> np.ndarray:
        return np.linalg.norm(self.q, axis=1)

    def radial_speed(self) -> np.ndarray:
        """d|q|/dt = <p, q/|q|> (q' = p exactly); 0 at the origin."""
        r = self.radius()
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.einsum("ij,ij->i", self.p, self.q) / r
        return np.where(r > 0, v, 0.0)


@dataclass
class AdvanceResult:
    x: PhasePoint
    S: float
    escaped: bool
    t_escape: float = math.nan


def _advance_arrays(P, Q, S, active, field: FrozenField, dt, cfg: FlowConfig, hinit):
    model = field.model
    return kernels.advance(P, Q, S, active, dt, cfg.ode_tol, cfg.X_max, cfg.hmin, hinit,
                           field.grid, model.kernel.kind, model.kernel.params,
                           model.potential_params)


def advance_particle(x0: PhasePoint, S0: float, field: FrozenField, dt: float,
                     cfg: FlowConfig) -> AdvanceResult:
    """Integrate one particle over ``dt`` under a frozen field.

    Escape times are relative to the start of the step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    P = x0.p.reshape(1, -1)
    Q = x0.q.reshape(1, -1)
    P1, Q1, S1, status, tev, _ = _advance_arrays(P, Q, np.array([float(S0)]), np.ones(1, bool),
                                                 field, dt, cfg, np.array([dt]))
    if status[0] == kernels.NONFINITE:
        raise NonFinite(0, 0.0)
    return AdvanceResult(PhasePoint(P1[0], Q1[0]), float(S1[0]), bool(status[0] == kernels.ESCAPED),
                         float(tev[0]))


def step_scheme(mu: ParticleMeasure, model: HamiltonianModel, cfg: FlowConfig, k: int = 0,
                substeps: int = 1, samples: list | None = None) -> ParticleMeasure:
    """Frozen-field step ``k``, i.e. from time k*h to (k+1)*h; returns a new ensemble.

    With ``substeps > 1`` the step is integrated in equal pieces under the
    same frozen field and the intermediate states are appended to
    ``samples`` as ``(t, P, Q, S, escaped)`` tuples.
    """
    field = FrozenField.from_measure(model, mu, cfg.eps)
    out = mu.copy()
    h = cfg.h
    t0 = k * h
    hint = out.meta.get("hint")
    if hint is None or hint.shape[0] != out.n:
        hint = np.full(out.n, h)
    dt = h / substeps
    for j in range(substeps):
        active = ~out.escaped
        P1, Q1, S1, status, tev, hint = _advance_arrays(out.p, out.q, out.S, active, field, dt, cfg,
                                                        hint)
        bad = np.nonzero(status == kernels.NONFINITE)[0]
        if bad.size:
            raise NonFinite(int(bad[0]), t0 + j * dt)
        esc = status == kernels.ESCAPED
        out.p[active] = P1[active]
        out.q[active] = Q1[active]
        out.S[active] = S1[active]
        out.escaped = out.escaped | esc
        out.t_escape[esc] = t0 + j * dt + tev[esc]
        if samples is not None and j < substeps - 1:
            samples.append((t0 + (j + 1) * dt, out.p.copy(), out.q.copy(), out.S.copy(),
                            out.escaped.copy()))
    out.t = t0 + h
    out.meta["hint"] = hint
    return out


@dataclass
class RunRecord:
    """Grid-time diagnostics plus per-particle samples of a scheme run."""

    cfg: FlowConfig
    alphas: tuple
    times: np.ndarray
    mass: np.ndarray
    energy: np.ndarray
    moments: np.ndarray          # (len(times), len(alphas))
    n_escaped: np.ndarray
    max_p: np.ndarray
    max_q: np.ndarray
    sample_times: np.ndarray     # includes sub-step samples
    P: np.ndarray                # (m, N, d)
    Q: np.ndarray
    S: np.ndarray                # (m, N)
    escaped: np.ndarray          # (m, N)
    w0: np.ndarray
    t_escape: np.ndarray
    error: str | None = None

    @property
    def n_particles(self) -> int:
        return self.w0.shape[0]

    @property
    def complete(self) -> bool:
        return self.error is None

    def measure(self, j: int) -> ParticleMeasure:
        """Ensemble at sample index ``j``."""
        te = np.where(self.escaped[j], self.t_escape, np.nan)
        return ParticleMeasure(self.P[j].copy(), self.Q[j].copy(), self.w0.copy(), self.S[j].copy(),
                               self.escaped[j].copy(), te, t=float(self.sample_times[j]))

    def grid_index(self, t: float) -> int:
        j = int(np.argmin(np.abs(self.sample_times - t)))
        return j

    def trajectory(self, i: int) -> Trajectory:
        """Samples of particle ``i`` up to (excluding) its escape."""
        alive = ~self.escaped[:, i]
        m = int(alive.sum())
        return Trajectory(self.sample_times[:m].copy(), self.P[:m, i].copy(), self.Q[:m, i].copy(),
                          self.S[:m, i].copy(), bool(not alive.all()), float(self.t_escape[i]))

    def csv_rows(self):
        header = ["t", "mass", "energy"] + [f"M_{_fmt(a)}" for a in self.alphas] + [
            "n_escaped", "max_p", "max_q"]
        rows = []
        for j in range(len(self.times)):
            rows.append([_fmt(self.times[j]), _fmt(self.mass[j]), _fmt(self.energy[j])]
                        + [_fmt(v) for v in self.moments[j]]
                        + [str(int(self.n_escaped[j])), _fmt(self.max_p[j]), _fmt(self.max_q[j])])
        return header, rows

    def to_csv(self, path=None) -> str:
        header, rows = self.csv_rows()
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def snapshot_csv(self, j: int = -1, path=None) -> str:
        d = self.P.shape[2]
        header = [f"p{k}" for k in range(d)] + [f"q{k}" for k in range(d)] + ["w0", "S", "status"]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        for i in range(self.n_particles):
            esc = self.escaped[j, i]
            status = f"escaped:{_fmt(self.t_escape[i])}" if esc else "alive"
            wr.writerow([_fmt(v) for v in self.P[j, i]] + [_fmt(v) for v in self.Q[j, i]]
                        + [_fmt(self.w0[i]), _fmt(self.S[j, i]), status])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def save_npz(self, path) -> None:
        np.savez(path, sample_times=self.sample_times, P=self.P, Q=self.Q, S=self.S,
                 escaped=self.escaped, w0=self.w0, t_escape=self.t_escape, times=self.times,
                 mass=self.mass, energy=self.energy, moments=self.moments,
                 n_escaped=self.n_escaped, max_p=self.max_p, max_q=self.max_q,
                 alphas=np.array(self.alphas, dtype=float),
                 cfg=np.array([self.cfg.eps, self.cfg.T, self.cfg.n, self.cfg.ode_tol,
                               self.cfg.X_max,
                               np.nan if self.cfg.h_min is None else self.cfg.h_min,
                               self.cfg.seed]))

    @classmethod
    def load_npz(cls, path) -> "RunRecord":
        z = np.load(path)
        c = z["cfg"]
        cfg = FlowConfig(eps=float(c[0]), T=float(c[1]), n=int(c[2]), ode_tol=float(c[3]),
                         X_max=float(c[4]),
                         h_min=None if np.isnan(c[5]) else float(c[5]), seed=int(c[6]))
        return cls(cfg, tuple(float(a) for a in z["alphas"]), z["times"], z["mass"], z["energy"],
                   z["moments"], z["n_escaped"], z["max_p"], z["max_q"], z["sample_times"], z["P"],
                   z["Q"], z["S"], z["escaped"], z["w0"], z["t_escape"])


def _fmt(v) -> str:
    """Shortest round-trip decimal."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def evolve(mu0: ParticleMeasure, model: HamiltonianModel, cfg: FlowConfig,
           alphas: Sequence[float] = (), observers: Sequence[Callable] = (),
           substeps: int = 1, normalize: bool = False) -> RunRecord:
    """Apply the scheme ``cfg.n`` times from ``mu0`` and record diagnostics at grid times.

    Each observer is called as ``observer(k, mu_k)`` after the diagnostics of
    grid time k are recorded. A non-finite state stops the run; the record
    up to the last good step is returned with ``error`` set.
    """
    m0 = total_mass(mu0, 0.0)
    if abs(m0 - 1.0) > 1e-9:
        if not normalize or m0 <= 0:
            raise ValueError(f"initial mass is {m0!r}, expected 1")
        mu0 = mu0.copy()
        mu0.w0 = mu0.w0 / m0
    mu = mu0.copy()
    mu.t = 0.0
    mu.meta.pop("hint", None)
    alphas = tuple(float(a) for a in alphas)
    diag = []
    samples = [(0.0, mu.p.copy(), mu.q.copy(), mu.S.copy(), mu.escaped.copy())]
    error = None

    def record(k, m):
        alive = ~m.escaped
        diag.append((
            k * cfg.h, total_mass(m, cfg.eps), hamiltonian_energy(model, m, cfg.eps),
            [exp_moment(m, a, cfg.eps) for a in alphas], int(m.escaped.sum()),
            float(np.linalg.norm(m.p[alive], axis=1).max()) if alive.any() else 0.0,
            float(np.linalg.norm(m.q[alive], axis=1).max()) if alive.any() else 0.0,
        ))
        for obs in observers:
            obs(k, m)

    record(0, mu)
    for k in range(cfg.n):
        try:
            mu = step_scheme(mu, model, cfg, k, substeps=substeps, samples=samples)
        except NonFinite as exc:
            error = str(exc)
            break
        mu.t = (k + 1) * cfg.h
        samples.append((mu.t, mu.p.copy(), mu.q.copy(), mu.S.copy(), mu.escaped.copy()))
        record(k + 1, mu)

    nd = len(alphas)
    return RunRecord(
        cfg=cfg, alphas=alphas,
        times=np.array([r[0] for r in diag]), mass=np.array([r[1] for r in diag]),
        energy=np.array([r[2] for r in diag]),
        moments=np.array([r[3] for r in diag], dtype=float).reshape(len(diag), nd),
        n_escaped=np.array([r[4] for r in diag]), max_p=np.array([r[5] for r in diag]),
        max_q=np.array([r[6] for r in diag]),
        sample_times=np.array([s[0] for s in samples]), P=np.array([s[1] for s in samples]),
        Q=np.array([s[2] for s in samples]), S=np.array([s[3] for s in samples]),
        escaped=np.array([s[4] for s in samples]), w0=mu0.w0.copy(), t_escape=mu.t_escape.copy(),
        error=error,
    )


def retraction(b: float):
    """C^2 radial map: identity on |x| <= b, image inside the (b+1)-ball, 0 for |x| >= b+2."""
    if not b > 0:
        raise ValueError("b must be positive")

    def phi(x):
        x = np.asarray(x, dtype=np.float64)
        r = float(np.linalg.norm(x))
        if r <= b:
            return x
        s = min((r - b) / 2.0, 1.0)
        # quintic smootherstep from 1 down to 0: C^2 at both ends
        chi = 1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
        return x * chi

    return phi


def truncated_flow(x0: PhasePoint, b: float, model: HamiltonianModel, mu: ParticleMeasure | None,
                   cfg: FlowConfig, t: float, sample_times=None) -> Trajectory:
    """Trajectory of ``x' = v(phi_b(x))`` over [0, t] with the field frozen at ``mu``.

    The retracted velocity is bounded, so the solution exists on the whole
    interval. Samples default to the scheme grid spacing ``cfg.h``.
    """
    field = FrozenField.from_measure(model, mu, cfg.eps)
    phi = retraction(b)
    d = model.d

    def f(y):
        v = field.velocity(phi(y[: 2 * d]))[0]
        return np.concatenate([v, [np.linalg.norm(v)]])

    if sample_times is None:
        m = max(1, int(round(t / cfg.h)))
        sample_times = np.linspace(0.0, t, m + 1)
    y0 = np.concatenate([x0.as_array(), [0.0]])
    with np.errstate(over="ignore", invalid="ignore"):
        res = dopri(f, y0, t, tol=cfg.ode_tol, h0=min(cfg.h, t), sample_times=sample_times)
    ys = res.ys
    return Trajectory(res.ts, ys[:, :d], ys[:, d:2 * d], ys[:, 2 * d])


def trajectory(x0: PhasePoint, model: HamiltonianModel, mu: ParticleMeasure | None,
               cfg: FlowConfig, t: float, samples: int | None = None) -> Trajectory:
    """Untruncated single-particle trajectory under a frozen field, sampled on a uniform grid."""
    field = FrozenField.from_measure(model, mu, cfg.eps)
    m = samples if samples is not None else max(1, int(round(t / cfg.h)))
    dt = t / m
    P, Q, S = x0.p.reshape(1, -1).copy(), x0.q.reshape(1, -1).copy(), np.zeros(1)
    ts, ps, qs, ss = [0.0], [P[0].copy()], [Q[0].copy()], [0.0]
    hint = np.array([dt])
    esc, te = False, math.nan
    for j in range(m):
        P1, Q1, S1, status, tev, hint = _advance_arrays(P, Q, S, np.ones(1, bool), field, dt, cfg,
                                                        hint)
        if status[0] == kernels.NONFINITE:
            raise NonFinite(0, j * dt)
        if status[0] == kernels.ESCAPED:
            esc, te = True, j * dt + float(tev[0])
            break
        P, Q, S = P1, Q1, S1
        ts.append((j + 1) * dt)
        ps.append(P[0].copy())
        qs.append(Q[0].copy())
        ss.append(float(S[0]))
    return Trajectory(np.array(ts), np.array(ps), np.array(qs), np.array(ss), esc, te)


def escape_time(x0: PhasePoint, model: HamiltonianModel, mu: ParticleMeasure | None,
                cfg: FlowConfig) -> float:
    """First time the escape predicate fires within [0, cfg.T], else :data:`BOUNDED`.

    The interaction part of the field is frozen at ``mu`` (or absent).
    """
    field = FrozenField.from_measure(model, mu, cfg.eps)
    P, Q, S = x0.p.reshape(1, -1).copy(), x0.q.reshape(1, -1).copy(), np.zeros(1)
    dt = cfg.h
    hint = np.array([dt])
    for j in range(cfg.n):
        P, Q, S, status, tev, hint = _advance_arrays(P, Q, S, np.ones(1, bool), field, dt, cfg,
                                                     hint)
        if status[0] == kernels.NONFINITE:
            raise NonFinite(0, j * dt)
        if status[0] == kernels.ESCAPED:
            return j * dt + float(tev[0])
    return BOUNDED
