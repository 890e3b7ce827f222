"""Hamiltonian data: interaction kernel W, external potential Phi, and the
mean-field quantities built from them (field, velocity, energy)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .phase_space import ParticleMeasure, PhasePoint

# max of x(1-x^2)^2 on [0, 1], attained at x = 1/sqrt(5)
_GRAD_PEAK = 16.0 / (25.0 * math.sqrt(5.0))


@dataclass(frozen=True)
class ZeroKernel:
    kind = 0
    a: float = 0.0
    B: float = 0.0

    def value(self, z):
        return np.zeros(np.atleast_2d(z).shape[0])

    def grad(self, z):
        return np.zeros_like(np.atleast_2d(np.asarray(z, dtype=np.float64)))

    def hess(self, z):
        z = np.atleast_2d(z)
        return np.zeros((z.shape[0], z.shape[1], z.shape[1]))

    @property
    def params(self):
        return np.array([1.0, 0.0])


@dataclass(frozen=True)
class BumpKernel:
    """``W(z) = c (1 - |z|^2/a^2)^3`` for |z| < a, else 0 (even, C^2, compact support)."""

    kind = 1
    a: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("kernel support radius must be positive")

    @property
    def grad_max(self) -> float:
        return 6.0 * abs(self.c) / self.a * _GRAD_PEAK

    @property
    def B(self) -> float:
        """Bound with |W| <= B and |grad W| < B (strict, hence the tiny inflation)."""
        return max(abs(self.c), self.grad_max * (1.0 + 1e-9))

    @property
    def params(self):
        return np.array([self.a, self.c])

    def _t(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        r2 = np.einsum("ij,ij->i", z, z)
        return z, np.where(r2 < self.a**2, 1.0 - r2 / self.a**2, 0.0)

    def value(self, z):
        _, t = self._t(z)
        return self.c * t**3

    def grad(self, z):
        z, t = self._t(z)
        return (-6.0 * self.c / self.a**2 * t * t)[:, None] * z

    def hess(self, z):
        z, t = self._t(z)
        d = z.shape[1]
        eye = np.eye(d)[None]
        outer = z[:, :, None] * z[:, None, :]
        return (-6.0 * self.c / self.a**2 * (t * t))[:, None, None] * eye + (
            24.0 * self.c / self.a**4 * t
        )[:, None, None] * outer


@dataclass(frozen=True)
class PowerPotential:
    """``Phi(q) = sum_j k2_j q_j^2 / 2 + k4 |q|^gamma``.

    ``k2`` may be a scalar (radial) or one stiffness per axis; a negative
    ``k4`` with ``gamma > 2`` gives the super-quadratic drop that makes
    particles reach infinity in finite time.
    """

    k2: float | tuple = 0.0
    k4: float = 0.0
    gamma: float = 4.0

    def __post_init__(self):
        if self.k4 != 0.0 and self.gamma < 2.0:
            raise ValueError("gamma must be >= 2 so that Phi is C^2 at the origin")

    def k2_vec(self, d: int) -> np.ndarray:
        k2 = np.atleast_1d(np.asarray(self.k2, dtype=np.float64))
        if k2.size == 1:
            return np.full(d, k2[0])
        if k2.size != d:
            raise ValueError(f"k2 has {k2.size} entries for dimension {d}")
        return k2

    @property
    def radial(self) -> bool:
        k2 = np.atleast_1d(np.asarray(self.k2, dtype=np.float64))
        return bool(np.all(k2 == k2[0]))

    def params(self, d: int) -> np.ndarray:
        return np.concatenate([[float(self.k4), float(self.gamma)], self.k2_vec(d)])

    def value(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        return kernels.potential_value(q, self.params(q.shape[1]))

    def grad(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        return kernels.potential_grad(q, self.params(q.shape[1]))

    def radial_value(self, r):
        """Phi along a ray for radial potentials (``k2`` scalar)."""
        r = np.asarray(r, dtype=np.float64)
        k2 = float(np.atleast_1d(self.k2)[0])
        return 0.5 * k2 * r * r + self.k4 * np.abs(r) ** self.gamma

    def radial_slope(self, r):
        """<grad Phi(q), q/|q|> at |q| = r for radial potentials."""
        r = np.asarray(r, dtype=np.float64)
        k2 = float(np.atleast_1d(self.k2)[0])
        return k2 * r + self.k4 * self.gamma * np.abs(r) ** (self.gamma - 1.0)

    @property
    def b2(self) -> float:
        return max(2.0, self.gamma) if self.k4 != 0.0 else 2.0

    @property
    def B1(self) -> float:
        """Constant with |Phi(q)| <= B1 |q|^b2 for |q| >= 1."""
        return 0.5 * float(np.max(np.abs(np.atleast_1d(self.k2)))) + abs(self.k4)


@dataclass(frozen=True)
class HamiltonianModel:
    potential: PowerPotential = field(default_factory=PowerPotential)
    kernel: BumpKernel | ZeroKernel = field(default_factory=ZeroKernel)
    d: int = 1

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        self.potential.k2_vec(self.d)

    @property
    def B(self) -> float:
        return self.kernel.B

    @property
    def potential_params(self) -> np.ndarray:
        return self.potential.params(self.d)


def field_grid(model: HamiltonianModel, mu: ParticleMeasure, eps: float) -> kernels.CellGrid:
    """Cell grid (cell side = kernel range) over alive positions with decayed weights."""
    keep = ~mu.escaped
    cell = model.kernel.a if model.kernel.kind else 1.0
    return kernels.build_grid(mu.q[keep], mu.weights(eps)[keep], cell)


def interaction_field(model: HamiltonianModel, mu: ParticleMeasure, qbar, eps: float, grid=None):
    """``(W*mu(qbar), grad W*mu(qbar))``; ``qbar`` may be one point or an (M, d) batch."""
    qbar = np.asarray(qbar, dtype=np.float64)
    single = qbar.ndim == 1
    x = qbar.reshape(1, -1) if single else qbar
    if model.kernel.kind == 0:
        w, g = np.zeros(x.shape[0]), np.zeros_like(x)
    else:
        grid = field_grid(model, mu, eps) if grid is None else grid
        w, g = kernels.field_query(x, grid, model.kernel.kind, model.kernel.params)
    return (float(w[0]), g[0]) if single else (w, g)


def velocity(model: HamiltonianModel, mu: ParticleMeasure, x, eps: float, grid=None):
    """Symplectic velocity ``(-grad(Phi + W*mu)(q), p)``.

    ``x`` is a :class:`PhasePoint`, a flat ``[p, q]`` vector, or (M, 2d) rows.
    """
    d = model.d
    if isinstance(x, PhasePoint):
        x = x.as_array()
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x.reshape(1, -1) if single else x
    p, q = xs[:, :d], xs[:, d:]
    _, gf = interaction_field(model, mu, q, eps, grid=grid)
    v = np.hstack([-model.potential.grad(q) - gf, p])
    return v[0] if single else v


def hamiltonian_energy(model: HamiltonianModel, mu: ParticleMeasure, eps: float) -> float:
    w = mu.weights(eps)
    keep = w > 0
    if not keep.any():
        return 0.0
    p, q, w = mu.p[keep], mu.q[keep], w[keep]
    kin = 0.5 * np.sum(w * np.einsum("ij,ij->i", p, p))
    wconv, _ = interaction_field(model, mu, q, eps)
    inter = 0.5 * np.sum(w * wconv)
    pot = np.sum(w * model.potential.value(q))
    return float(kin + inter + pot)
