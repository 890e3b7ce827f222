"""Weighted particle ensembles on phase space and their integrals.

A measure is stored as parallel arrays: momenta ``p`` and positions ``q``
of shape (N, d), initial weights ``w0``, accumulated path lengths ``S`` and
an escape mask. The effective weight of particle i for a dissipation rate
``eps`` is ``w0[i] * exp(-eps * S[i])``; escaped particles carry none.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

MOMENT_CAP = 1e300
_LOG_CAP = np.log(MOMENT_CAP)


@dataclass(frozen=True)
class PhasePoint:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=np.float64))
        q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p and q must be vectors of the same dimension")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def d(self) -> int:
        return self.p.shape[0]

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_array(cls, x) -> "PhasePoint":
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[0] // 2
        return cls(x[:d], x[d:])


@dataclass(frozen=True)
class WeightedParticle:
    x: PhasePoint
    w0: float
    S: float = 0.0
    escaped: bool = False
    t_escape: float = float("nan")

    def weight(self, eps: float) -> float:
        return 0.0 if self.escaped else self.w0 * float(np.exp(-eps * self.S))


@dataclass
class ParticleMeasure:
    """Finite weighted ensemble; the empty ensemble is the zero measure."""

    p: np.ndarray
    q: np.ndarray
    w0: np.ndarray
    S: np.ndarray = None
    escaped: np.ndarray = None
    t_escape: np.ndarray = None
    t: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.p.ndim == 1:
            self.p = self.p[:, None]
        if self.q.ndim == 1:
            self.q = self.q[:, None]
        n = self.p.shape[0]
        if self.q.shape != self.p.shape:
            raise ValueError(f"p has shape {self.p.shape} but q has {self.q.shape}")
        self.w0 = np.asarray(self.w0, dtype=np.float64).reshape(n)
        if np.any(self.w0 < 0):
            raise ValueError("weights must be nonnegative")
        self.S = np.zeros(n) if self.S is None else np.asarray(self.S, dtype=np.float64).reshape(n)
        if self.escaped is None:
            self.escaped = np.zeros(n, dtype=bool)
        else:
            self.escaped = np.asarray(self.escaped, dtype=bool).reshape(n)
        if self.t_escape is None:
            self.t_escape = np.full(n, np.nan)
        else:
            self.t_escape = np.asarray(self.t_escape, dtype=np.float64).reshape(n)

    @classmethod
    def empty(cls, d: int) -> "ParticleMeasure":
        return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0))

    @classmethod
    def from_particles(cls, particles: Sequence[WeightedParticle], d: int | None = None):
        if not particles:
            if d is None:
                raise ValueError("dimension needed for an empty ensemble")
            return cls.empty(d)
        return cls(
            p=np.array([wp.x.p for wp in particles]),
            q=np.array([wp.x.q for wp in particles]),
            w0=np.array([wp.w0 for wp in particles]),
            S=np.array([wp.S for wp in particles]),
            escaped=np.array([wp.escaped for wp in particles]),
            t_escape=np.array([wp.t_escape for wp in particles]),
        )

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def d(self) -> int:
        return self.p.shape[1]

    @property
    def alive(self) -> np.ndarray:
        return ~self.escaped

    @property
    def x(self) -> np.ndarray:
        """Phase-space coordinates stacked as (N, 2d) rows ``[p, q]``."""
        return np.hstack([self.p, self.q])

    def particle(self, i: int) -> WeightedParticle:
        return WeightedParticle(PhasePoint(self.p[i], self.q[i]), float(self.w0[i]),
                                float(self.S[i]), bool(self.escaped[i]), float(self.t_escape[i]))

    def weights(self, eps: float) -> np.ndarray:
        """Effective weights ``w0 exp(-eps S)``, zero for escaped particles."""
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        with np.errstate(over="ignore", invalid="ignore"):
            w = self.w0 * np.exp(-eps * self.S) if eps > 0 else self.w0.copy()
        w[self.escaped] = 0.0
        return w

    def copy(self) -> "ParticleMeasure":
        return replace(self, p=self.p.copy(), q=self.q.copy(), w0=self.w0.copy(), S=self.S.copy(),
                       escaped=self.escaped.copy(), t_escape=self.t_escape.copy(),
                       meta=dict(self.meta))


def total_mass(mu: ParticleMeasure, eps: float) -> float:
    return float(np.sum(mu.weights(eps)))


def exp_moment(mu: ParticleMeasure, alpha: float, eps: float) -> float:
    """Sum of ``w * exp(alpha |x|)`` over alive particles.

    Values above ``MOMENT_CAP`` are reported as exactly ``MOMENT_CAP``
    (see :func:`moment_saturated`) instead of overflowing to inf.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    w = mu.weights(eps)
    keep = w > 0
    if not keep.any():
        return 0.0
    r = np.sqrt(np.einsum("ij,ij->i", mu.x[keep], mu.x[keep]))
    expo = alpha * r
    if expo.max() < 690.0:
        val = float(np.sum(w[keep] * np.exp(expo)))
        return min(val, MOMENT_CAP)
    logs = np.log(w[keep]) + expo
    top = logs.max()
    lse = top + np.log(np.sum(np.exp(logs - top)))
    return MOMENT_CAP if lse >= _LOG_CAP else float(np.exp(lse))


def moment_saturated(value: float) -> bool:
    return value >= MOMENT_CAP


def integrate(mu: ParticleMeasure, phi: Callable[[np.ndarray], np.ndarray], eps: float) -> float:
    """Integral of ``phi`` against the decayed measure; ``phi`` maps (N, 2d) rows to (N,)."""
    w = mu.weights(eps)
    keep = ~mu.escaped
    if not keep.any():
        return 0.0
    vals = np.asarray(phi(mu.x[keep]), dtype=np.float64).reshape(-1)
    return float(np.sum(w[keep] * vals))


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def momentum_cutoff(r: float, pnorm):
    """C^1 cutoff: 0 for |p| <= r-1, 1 for |p| >= r, cubic in between."""
    return smoothstep(np.asarray(pnorm, dtype=np.float64) - (r - 1.0))


@dataclass(frozen=True)
class SmoothCutoff:
    """Momentum cutoff ``theta_r`` (kind="momentum") or a compact bump (kind="bump")."""

    r: float
    kind: str = "momentum"
    center: np.ndarray | None = None

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("radius must be positive")
        if self.kind not in ("momentum", "bump"):
            raise ValueError(f"unknown cutoff kind {self.kind!r}")
        if self.kind == "bump":
            c = np.zeros(1) if self.center is None else np.asarray(self.center, dtype=np.float64)
            object.__setattr__(self, "center", c)

    def __call__(self, x):
        if self.kind == "momentum":
            return momentum_cutoff(self.r, np.linalg.norm(np.atleast_2d(x), axis=1))
        return SpatialBump(self.center, self.r)(x)


@dataclass(frozen=True)
class SpatialBump:
    """``(1 - |x-c|^2/rho^2)^3`` inside the ball, 0 outside: C^2 with compact support."""

    center: np.ndarray
    radius: float
    height: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(-1))
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def __call__(self, x):
        z = np.atleast_2d(x) - self.center
        t = np.clip(1.0 - np.einsum("ij,ij->i", z, z) / self.radius**2, 0.0, None)
        return self.height * t**3

    def grad(self, x):
        z = np.atleast_2d(x) - self.center
        t = np.clip(1.0 - np.einsum("ij,ij->i", z, z) / self.radius**2, 0.0, None)
        return (self.height * -6.0 / self.radius**2 * t * t)[:, None] * z


def tightness_Cr(mu: ParticleMeasure, r: float, qbar, grad_w, eps: float) -> float:
    """Mass-weighted ``theta_r(|p|) |grad W(qbar - q)|`` summed over alive particles.

    ``grad_w`` maps an (N, d) array of separations to (N, d) gradients, e.g.
    :meth:`defham.model.BumpKernel.grad`.
    """
    if r <= 1:
        raise ValueError("tightness_Cr needs r > 1 so the cutoff's inner radius is positive")
    keep = ~mu.escaped
    if not keep.any():
        return 0.0
    w = mu.weights(eps)[keep]
    theta = momentum_cutoff(r, np.linalg.norm(mu.p[keep], axis=1))
    z = np.asarray(qbar, dtype=np.float64).reshape(1, -1) - mu.q[keep]
    g = np.linalg.norm(np.atleast_2d(grad_w(z)), axis=1)
    return float(np.sum(w * theta * g))
