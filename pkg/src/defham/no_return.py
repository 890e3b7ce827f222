"""Single-particle no-return certificates.

A radial bounding potential ``Upsilon(q) = u(|q|)`` dominates the outward
radial force of the true dynamics. Radii beyond which ``u`` stays strictly
below its value ("star-rings") cannot be re-crossed inward once crossed
outward, which gives the audits in this module: the radial-speed monitor,
the phase-cylinder containment audit and the escape-time bounds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .flow import RunRecord, Trajectory
from .model import HamiltonianModel
from .ode import dopri


class InsufficientSampling(ValueError):
    pass


class NoRing(ValueError):
    pass


@dataclass(frozen=True)
class BoundingPotential:
    """Radial profile ``u`` with derivative ``du``; ``B`` bounds |grad Psi| for the interaction."""

    u: Callable
    du: Callable
    B: float = 0.0
    name: str = "custom"

    def __call__(self, r):
        return self.u(np.asarray(r, dtype=np.float64))

    @classmethod
    def from_model(cls, model: HamiltonianModel, mass: float = 1.0) -> "BoundingPotential":
        """Tightest profile for a radial model: ``u(r) = B m r + Phi(r e_1)``."""
        if not model.potential.radial:
            raise ValueError("from_model needs a radially symmetric potential")
        B = model.B * mass
        pot = model.potential
        return cls(lambda r: B * np.asarray(r) + pot.radial_value(r),
                   lambda r: B + pot.radial_slope(r), B, "auto")

    @classmethod
    def polynomial(cls, coeffs: Sequence[float], B: float = 0.0) -> "BoundingPotential":
        """``u(r) = sum_k coeffs[k] r^k``."""
        poly = np.polynomial.Polynomial(np.asarray(coeffs, dtype=np.float64))
        der = poly.deriv()
        return cls(lambda r: poly(np.asarray(r, dtype=np.float64)),
                   lambda r: der(np.asarray(r, dtype=np.float64)), B, "poly")

    def auxiliary_hamiltonian(self, p, q):
        """``0.5 <p, q/|q|>^2 + u(|q|)`` for rows of (p, q)."""
        p, q = np.atleast_2d(p), np.atleast_2d(q)
        r = np.linalg.norm(q, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            vr = np.where(r > 0, np.einsum("ij,ij->i", p, q) / r, 0.0)
        return 0.5 * vr * vr + self.u(r)


def sphere_directions(d: int, count: int = 2048) -> np.ndarray:
    """Deterministic, roughly uniform unit vectors in R^d."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        ang = 2.0 * np.pi * (np.arange(count) + 0.5) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    if d == 3:
        # Fibonacci sphere
        i = np.arange(count) + 0.5
        z = 1.0 - 2.0 * i / count
        phi = np.pi * (3.0 - math.sqrt(5.0)) * i
        rho = np.sqrt(1.0 - z * z)
        return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    from scipy.stats import norm, qmc

    u = qmc.Halton(d, scramble=False).random(count + 1)[1:]
    g = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def radial_force_max(model: HamiltonianModel, r, samples: int = 2048, safety: float = 1.05):
    """``max_{|q|=r} <grad Phi(q), q/|q|>`` for each radius in ``r``.

    Exact for radial potentials; otherwise a sphere-sample maximum pushed
    up by ``safety`` (relative to its magnitude).
    """
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    pot = model.potential
    if pot.radial:
        return pot.radial_slope(r)
    dirs = sphere_directions(model.d, samples)
    out = np.empty_like(r)
    for i, ri in enumerate(r):
        q = ri * dirs
        vals = np.einsum("ij,ij->i", pot.grad(q), dirs)
        m = vals.max()
        out[i] = m + (safety - 1.0) * abs(m)
    return out


@dataclass
class BoundingReport:
    ok: bool
    worst_margin: float
    worst_radius: float
    margins: np.ndarray = field(repr=False, default=None)


def validate_bounding_potential(u: BoundingPotential, model: HamiltonianModel, B: float | None,
                                radii, samples: int = 2048, safety: float = 1.05) -> BoundingReport:
    """Check ``u'(r) >= B + max_{|q|=r} <grad Phi, q/|q|>`` on ``radii``."""
    B = u.B if B is None else B
    radii = np.asarray(radii, dtype=np.float64)
    need = B + radial_force_max(model, radii, samples, safety)
    have = u.du(radii)
    margin = have - need
    k = int(np.argmin(margin))
    scale = 1e-12 * (1.0 + np.abs(have) + np.abs(need))
    ok = bool(np.all(margin >= -scale))
    return BoundingReport(ok, float(margin[k]), float(radii[k]), margin)


@dataclass(frozen=True)
class StarRing:
    radius: float
    index: int


def find_star_rings(u, radii, R_max: float | None = None, count: int = 1) -> list[StarRing]:
    """Grid radii r > 0 with u(r) strictly above every later grid value up to ``R_max``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    radii = np.asarray(radii, dtype=np.float64)
    if R_max is not None:
        radii = radii[radii <= R_max]
    if radii.size < 2:
        return []
    vals = np.asarray(u(radii), dtype=np.float64)
    # suffix maximum of the values strictly after each index
    later = np.empty_like(vals)
    later[-1] = np.inf
    later[:-1] = np.maximum.accumulate(vals[::-1])[::-1][1:]
    good = (radii > 0) & (vals > later)
    good[-1] = False
    idx = np.nonzero(good)[0][:count]
    return [StarRing(float(radii[i]), k) for k, i in enumerate(idx)]


def recheck_ring(u, ring: StarRing, R_max: float, points: int) -> bool:
    fine = np.linspace(ring.radius, R_max, points)
    vals = np.asarray(u(fine), dtype=np.float64)
    return bool(np.all(vals[1:] < vals[0]))


@dataclass(frozen=True)
class PhaseCylinder:
    """``{|p| <= L + (a_star + eta) t} x {|q| <= L}``."""

    L: float
    a_star: float
    eta: float

    def momentum_bound(self, t):
        return self.L + (self.a_star + self.eta) * np.asarray(t, dtype=np.float64)

    def contains(self, p, q, t) -> np.ndarray:
        p, q = np.atleast_2d(p), np.atleast_2d(q)
        return (np.linalg.norm(p, axis=1) <= self.momentum_bound(t)) & (
            np.linalg.norm(q, axis=1) <= self.L)


def _hermite(t0, t1, q0, q1, v0, v1, t):
    """Cubic Hermite interpolant of q (and its derivative) with endpoint slopes v."""
    h = t1 - t0
    s = (t - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    q = h00 * q0 + h10 * h * v0 + h01 * q1 + h11 * h * v1
    d00 = (6 * s**2 - 6 * s) / h
    d10 = 3 * s**2 - 4 * s + 1
    d01 = (-6 * s**2 + 6 * s) / h
    d11 = 3 * s**2 - 2 * s
    dq = d00 * q0 + d10 * v0 + d01 * q1 + d11 * v1
    return q, dq


def locate_crossing(traj: Trajectory, j: int, rho: float):
    """Time and radial speed where |q| reaches ``rho`` inside sample interval [j, j+1]."""
    t0, t1 = traj.times[j], traj.times[j + 1]
    args = (t0, t1, traj.q[j], traj.q[j + 1], traj.p[j], traj.p[j + 1])
    lo, hi = t0, t1
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        qm, _ = _hermite(*args, mid)
        if np.linalg.norm(qm) >= rho:
            hi = mid
        else:
            lo = mid
    qs, dq = _hermite(*args, hi)
    r = np.linalg.norm(qs)
    return float(hi), float(np.dot(dq, qs) / r), qs, dq


@dataclass
class Certificate:
    crossed: bool
    t_star: float = math.nan
    speed_at_crossing: float = math.nan
    radial_speed: np.ndarray = field(default=None, repr=False)
    monotone_ok: bool = True
    reentered: bool = False
    htilde_ok: bool | None = None


def no_return_monitor(traj: Trajectory, ring: StarRing, u: BoundingPotential | None = None
                      ) -> Certificate:
    """Find the first outward crossing of |q| = ring radius and audit what follows.

    After the crossing the radial speed must stay >= its crossing value (up
    to 1e-6 relative), |q| must never drop back below the ring, and, when
    ``u`` is given, the auxiliary Hamiltonian must be nondecreasing.
    """
    rho = ring.radius
    r = traj.radius()
    if r.size == 0:
        return Certificate(False)
    up = np.nonzero((r[:-1] < rho) & (r[1:] >= rho))[0]
    if up.size == 0:
        if traj.escaped and r[-1] < rho:
            raise InsufficientSampling(
                f"trajectory escaped at t={traj.t_escape:g} after its last sample inside "
                f"radius {rho:g}")
        return Certificate(False)
    first = int(up[0]) + 1
    t_star, v_star, _, _ = locate_crossing(traj, first - 1, rho)
    vr = traj.radial_speed()[first:]
    tol = 1e-6 * (1.0 + abs(v_star))
    monotone_ok = bool(v_star > 0 and np.all(vr >= v_star - tol))
    reentered = bool(np.any(r[first:] < rho))
    h_ok = None
    if u is not None:
        # sample-to-sample check; the interpolated crossing state is too coarse for H~
        h_seq = u.auxiliary_hamiltonian(traj.p[first:], traj.q[first:])
        mag = 0.5 * vr**2 + np.abs(u(r[first:]))
        h_ok = bool(np.all(np.diff(h_seq) >= -1e-6 * (1.0 + mag[1:])))
    return Certificate(True, t_star, v_star, np.concatenate([[v_star], vr]), monotone_ok, reentered,
                       h_ok)


def momentum_growth_rate(model: HamiltonianModel, L: float, mass: float = 1.0,
                         samples: int = 2048) -> float:
    """``sup_{|q| <= L} |grad Phi| + B * mass``."""
    if not L > 0:
        raise ValueError("L must be positive")
    pot = model.potential
    if pot.radial:
        f = lambda r: abs(float(pot.radial_slope(r)))
        grid = np.linspace(0.0, L, 4097)
        vals = np.abs(pot.radial_slope(grid))
        k = int(np.argmax(vals))
        best = float(vals[k])
        if 0 < k < grid.size - 1:
            res = minimize_scalar(lambda r: -f(r), bounds=(grid[k - 1], grid[k + 1]),
                                  method="bounded", options={"xatol": 1e-12})
            best = max(best, -float(res.fun))
    else:
        dirs = sphere_directions(model.d, samples)
        best = 0.0
        for rr in np.linspace(0.0, L, 257):
            best = max(best, float(np.linalg.norm(pot.grad(rr * dirs), axis=1).max()))
        best *= 1.05
    return best + model.B * mass


@dataclass
class CylinderAudit:
    L: float
    a_star: float
    eta: float
    checked: int = 0
    position_exits: list = field(default_factory=list)
    unresolved_exits: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def cylinder_containment_audit(record: RunRecord, rings: Sequence[StarRing], a_star,
                               eta=None) -> list[CylinderAudit]:
    """Check that particles leave the growing cylinder only through its position face.

    ``a_star`` is one rate or one per ring; ``eta`` defaults to 5% of it.
    A violation is a particle, still within |q| < L, whose momentum exceeds
    ``L + (a_star + eta) t`` before any outward position crossing.
    """
    rings = list(rings)
    rates = np.broadcast_to(np.asarray(a_star, dtype=np.float64), (len(rings),))
    out = []
    ts = record.sample_times
    pn = np.linalg.norm(record.P, axis=2)
    qn = np.linalg.norm(record.Q, axis=2)
    for ring, a in zip(rings, rates):
        L = ring.radius
        e = 0.05 * a if eta is None else float(eta)
        cyl = PhaseCylinder(L, float(a), e)
        audit = CylinderAudit(L, float(a), e)
        bound = cyl.momentum_bound(ts)
        start = (pn[0] <= L) & (qn[0] <= L)
        for i in np.nonzero(start)[0]:
            audit.checked += 1
            alive = ~record.escaped[:, i]
            m = int(alive.sum())
            pos_out = qn[:m, i] > L
            mom_out = pn[:m, i] > bound[:m]
            jp = int(np.argmax(pos_out)) if pos_out.any() else None
            jm = int(np.argmax(mom_out)) if mom_out.any() else None
            if jm is not None and (jp is None or jm < jp):
                audit.violations.append({"particle": int(i), "t": float(ts[jm]),
                                         "p": float(pn[jm, i]), "q": float(qn[jm, i]),
                                         "bound": float(bound[jm])})
                continue
            if jp is not None:
                traj = Trajectory(ts[:m], record.P[:m, i], record.Q[:m, i], record.S[:m, i])
                tc, vc, _, _ = locate_crossing(traj, jp - 1, L)
                if jm == jp:
                    # both faces passed within one sample interval: compare at the crossing
                    s = (tc - ts[jp - 1]) / (ts[jp] - ts[jp - 1])
                    pc = (1 - s) * pn[jp - 1, i] + s * pn[jp, i]
                    if pc > cyl.momentum_bound(tc):
                        audit.violations.append({"particle": int(i), "t": float(tc), "p": float(pc),
                                                 "q": L, "bound": float(cyl.momentum_bound(tc))})
                        continue
                audit.position_exits.append({"particle": int(i), "t": float(tc),
                                             "radial_speed": float(vc)})
            elif m < ts.size:
                audit.unresolved_exits.append({"particle": int(i),
                                               "t_escape": float(record.t_escape[i])})
        out.append(audit)
    return out


@dataclass
class EscapeBound:
    L: float
    ell: float
    tau: float
    X_max: float
    converged: bool
    worst_state: tuple
    states_reaching: int


def _radial_exit_times(u: BoundingPotential, r0, v0, L, X_max, horizon, tol):
    f = lambda y: np.array([y[1], -float(u.du(abs(y[0]))) * (1.0 if y[0] >= 0 else -1.0)])
    with np.errstate(over="ignore", invalid="ignore"):
        first = dopri(f, [r0, v0], horizon, tol=tol, h0=1e-3,
                      stop=lambda y: abs(y[0]) >= L)
    if not first.stopped or first.y[1] * np.sign(first.y[0]) <= 0:
        return None
    rest = horizon - first.t
    with np.errstate(over="ignore", invalid="ignore"):
        second = dopri(f, first.y, rest, tol=tol, h0=1e-3, h_min=1e-15,
                       stop=lambda y: not abs(y[0]) < X_max)
    if second.stopped or second.collapsed:
        return second.t, True
    return rest, False


def escape_bound_tau(u: BoundingPotential, L: float, ell: float, horizon: float = 10.0,
                     X_max: float = 1e6, n_radii: int = 6, n_speeds: int = 6,
                     v_max: float | None = None, tol: float = 1e-10,
                     ring_grid: int = 2001) -> EscapeBound:
    """Longest time a ``u``-driven radial trajectory that was inside B_ell needs,
    after leaving B_L, to reach radius ``X_max``.

    The sup runs over a grid of start states (r0 in [0, ell], r0' >= 0);
    inward-moving starts are covered because they pass through a state at
    rest or at the origin first. ``converged`` is False when the answer
    still moves with X_max (no finite escape time).
    """
    if not ell < L:
        raise ValueError("need ell < L")
    for rad in (ell, L):
        if rad <= 0 or not recheck_ring(u, StarRing(rad, 0), max(4 * L, L + 10), ring_grid):
            raise NoRing(f"radius {rad:g} is not a certified star-ring of u")
    if v_max is None:
        rr = np.linspace(0.0, L, 512)
        span = float(np.max(u(rr)) - np.min(u(rr)))
        v_max = math.sqrt(2.0 * max(span, 1e-12)) + 1.0
    radii = np.linspace(0.0, ell, n_radii)
    speeds = np.linspace(0.0, v_max, n_speeds)
    best, worst, n_reach = -1.0, None, 0
    for r0 in radii:
        for v0 in speeds:
            res = _radial_exit_times(u, r0, v0, L, X_max, horizon, tol)
            if res is None:
                continue
            n_reach += 1
            if res[0] > best:
                best, worst = res[0], (float(r0), float(v0))
    if worst is None:
        return EscapeBound(L, ell, 0.0, X_max, True, (), 0)
    res10 = _radial_exit_times(u, worst[0], worst[1], L, 10.0 * X_max, horizon, tol)
    converged = res10 is not None and res10[1] and abs(res10[0] - best) <= 1e-2 * max(best, 1e-12)
    return EscapeBound(L, ell, best, X_max, bool(converged), worst, n_reach)
