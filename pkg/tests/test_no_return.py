import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from conftest import make_measure
from defham.flow import FlowConfig, Trajectory, evolve, trajectory
from defham.model import BumpKernel, HamiltonianModel, PowerPotential, ZeroKernel
from defham.no_return import (BoundingPotential, InsufficientSampling, NoRing, PhaseCylinder,
                              StarRing, cylinder_containment_audit, escape_bound_tau,
                              find_star_rings, momentum_growth_rate, no_return_monitor,
                              radial_force_max, recheck_ring, sphere_directions,
                              validate_bounding_potential)
from defham.phase_space import PhasePoint

QUART1 = HamiltonianModel(PowerPotential(0.0, -1.0, 4.0), ZeroKernel(), 1)
QUART2 = HamiltonianModel(PowerPotential(0.0, -1.0, 4.0), ZeroKernel(), 2)
HARM2 = HamiltonianModel(PowerPotential(1.0), ZeroKernel(), 2)
GRID = np.linspace(0.0, 10.0, 201)


def _suffix_oracle(vals):
    """O(n^2) scan: indices whose value beats every later value."""
    return [i for i in range(len(vals) - 1) if all(vals[i] > vals[j] for j in range(i + 1, len(vals)))]


# bounding potentials

def test_validate_quartic_equality():
    u = BoundingPotential.polynomial([0, 0, 0, 0, -1])
    rep = validate_bounding_potential(u, QUART2, 0.0, GRID)
    assert rep.ok and rep.worst_margin == pytest.approx(0.0, abs=1e-9)


def test_validate_harmonic_and_missing_offset():
    u = BoundingPotential.polynomial([0, 0, 0.5])
    rep = validate_bounding_potential(u, HARM2, 0.0, GRID)
    assert rep.ok and abs(rep.worst_margin) < 1e-12
    bad = validate_bounding_potential(u, HARM2, 1.0, GRID)
    assert not bad.ok
    np.testing.assert_allclose(bad.margins, -1.0, atol=1e-12)


def test_validate_sphere_sampling_for_nonradial_potential():
    # anisotropic stiffness: the max of <grad Phi, q/|q|> on |q| = r is 2 r
    model = HamiltonianModel(PowerPotential((1.0, 2.0, 1.0)), ZeroKernel(), 3)
    sampled = radial_force_max(model, [1.0, 2.0], safety=1.0)
    np.testing.assert_allclose(sampled, [2.0, 4.0], rtol=1e-3)
    inflated = radial_force_max(model, [1.0, 2.0])
    assert np.all(inflated >= 2.0 * np.array([1.0, 2.0]))
    # the exact slope 2r is rejected once the safety factor inflates the sampled max
    assert not validate_bounding_potential(BoundingPotential.polynomial([0, 0, 1.0]), model, 0.0,
                                           GRID).ok
    assert validate_bounding_potential(BoundingPotential.polynomial([0, 0, 1.1]), model, 0.0,
                                       GRID).ok
    dirs = sphere_directions(3, 2048)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
    assert sphere_directions(5, 64).shape == (64, 5)


def test_from_model_carries_interaction_bound():
    model = HamiltonianModel(PowerPotential(1.0), BumpKernel(1.0, 0.5), 2)
    u = BoundingPotential.from_model(model, mass=1.0)
    assert u.B == pytest.approx(model.B)
    assert validate_bounding_potential(u, model, None, GRID).ok
    with pytest.raises(ValueError):
        BoundingPotential.from_model(HamiltonianModel(PowerPotential((1.0, 2.0)), ZeroKernel(), 2))


# star rings

def test_rings_strictly_decreasing_profile():
    u = BoundingPotential.polynomial([0, 0, 0, 0, -1])
    rings = find_star_rings(u, GRID, count=3)
    assert [r.radius for r in rings] == list(GRID[1:4])


def test_rings_increasing_profile_is_empty():
    assert find_star_rings(lambda r: r**2, GRID, count=5) == []


def test_rings_match_bruteforce_scan():
    f = lambda r: np.sin(r) - r / 2
    grid = np.linspace(0.0, 30.0, 601)
    rings = find_star_rings(f, grid, count=1000)
    expected = [i for i in _suffix_oracle(list(f(grid))) if grid[i] > 0]
    assert [r.radius for r in rings] == list(grid[expected])
    assert np.all(np.diff([r.radius for r in rings]) > 0)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=40))
def test_rings_property_against_oracle(values):
    vals = np.array(values)
    grid = np.arange(1, vals.size + 1, dtype=float)
    lookup = dict(zip(grid, vals))
    rings = find_star_rings(lambda r: np.array([lookup[x] for x in np.atleast_1d(r)]), grid,
                            count=1000)
    assert [r.index for r in rings] == list(range(len(rings)))
    assert [r.radius for r in rings] == list(grid[_suffix_oracle(list(vals))])


def test_ring_recheck_on_finer_grid():
    u = BoundingPotential.polynomial([0, 0, 0, 0, -1])
    for ring in find_star_rings(u, GRID, count=4):
        assert recheck_ring(u, ring, 10.0, 10 * GRID.size)
    f = lambda r: np.sin(r) - r / 2
    assert not recheck_ring(f, StarRing(0.5, 0), 30.0, 3000)


def test_count_must_be_positive():
    with pytest.raises(ValueError):
        find_star_rings(lambda r: -r, GRID, count=0)


# monitor

def test_monitor_bounded_orbit_never_crosses():
    model = HamiltonianModel(PowerPotential(1.0), ZeroKernel(), 1)
    tr = trajectory(PhasePoint([0.0], [1.0]), model, None, FlowConfig(T=10.0, n=200), 10.0)
    cert = no_return_monitor(tr, StarRing(2.0, 0))
    assert not cert.crossed


def test_monitor_quartic_outward_crossing():
    u = BoundingPotential.polynomial([0, 0, 0, 0, -1])
    tr = trajectory(PhasePoint([0.5], [0.5]), QUART1, None, FlowConfig(T=3.0, n=600), 3.0)
    assert tr.escaped
    cert = no_return_monitor(tr, StarRing(1.0, 0), u)
    assert cert.crossed and cert.monotone_ok and not cert.reentered and cert.htilde_ok
    assert cert.speed_at_crossing > 0
    # the crossing time agrees with the energy quadrature of q'' = 4 q^3
    E = 0.5 * 0.25 - 0.5**4
    t_ref = quad(lambda q: 1 / math.sqrt(2 * (E + q**4)), 0.5, 1.0)[0]
    assert cert.t_star == pytest.approx(t_ref, abs=1e-6)


def test_monitor_flags_non_monotone_speed():
    ts = np.linspace(0, 1, 11)
    q = np.concatenate([np.linspace(0.5, 1.5, 6), 1.5 + 0.01 * np.arange(1, 6)])[:, None]
    p = np.gradient(q[:, 0], ts)[:, None]
    cert = no_return_monitor(Trajectory(ts, p, q, np.zeros(11)), StarRing(1.0, 0))
    assert cert.crossed and not cert.monotone_ok


def test_monitor_detects_reentry():
    ts = np.linspace(0, 2 * math.pi, 400)
    q = (1.5 * np.sin(ts))[:, None]
    p = (1.5 * np.cos(ts))[:, None]
    cert = no_return_monitor(Trajectory(ts, p, q, np.zeros(ts.size)), StarRing(1.0, 0))
    assert cert.crossed and cert.reentered and not cert.monotone_ok


def test_monitor_raises_when_escape_is_unbracketed():
    ts = np.array([0.0, 0.1])
    tr = Trajectory(ts, np.ones((2, 1)), np.array([[0.1], [0.2]]), np.zeros(2), True, 0.15)
    with pytest.raises(InsufficientSampling):
        no_return_monitor(tr, StarRing(1.0, 0))


# phase cylinder and momentum growth

def test_cylinder_membership_and_nesting():
    cyl = PhaseCylinder(2.0, 1.0, 0.1)
    assert cyl.contains([[2.0, 0.0]], [[0.0, 2.0]], 0.0)[0]
    assert not cyl.contains([[2.2, 0.0]], [[0.0, 0.0]], 0.0)[0]
    assert cyl.contains([[2.2, 0.0]], [[0.0, 0.0]], 0.5)[0]
    assert not cyl.contains([[0.0, 0.0]], [[2.01, 0.0]], 10.0)[0]


def test_momentum_growth_rate_examples():
    # wide support keeps the gradient below the amplitude, so B equals the amplitude
    assert BumpKernel(10.0, 1.0).B == 1.0
    free = HamiltonianModel(PowerPotential(), BumpKernel(10.0, 1.0), 2)
    assert momentum_growth_rate(free, 1.0, 1.0) == pytest.approx(1.0)
    harm = HamiltonianModel(PowerPotential(1.0), ZeroKernel(), 2)
    assert momentum_growth_rate(harm, 2.0, 1.0) == pytest.approx(2.0)
    quart = HamiltonianModel(PowerPotential(0.0, -1.0, 4.0), BumpKernel(10.0, 0.5), 1)
    assert momentum_growth_rate(quart, 3.0, 1.0) == pytest.approx(108.5)
    with pytest.raises(ValueError):
        momentum_growth_rate(harm, 0.0)


# cylinder audits

def _ball_measure(rng, n, radius, d=1):
    x = rng.uniform(-1, 1, (4 * n, 2 * d))
    x = x[np.linalg.norm(x, axis=1) <= 1][:n] * radius
    return make_measure(x[:, :d], x[:, d:])


def test_cylinder_audit_harmonic_no_exits(rng):
    mu = make_measure(rng.normal(0, 0.3, (100, 2)), rng.normal(0, 0.3, (100, 2)))
    rec = evolve(mu, HARM2, FlowConfig(T=5.0, n=100))
    ring = StarRing(2.0, 0)
    (audit,) = cylinder_containment_audit(rec, [ring], momentum_growth_rate(HARM2, 2.0))
    assert audit.ok and not audit.position_exits and audit.checked == 100


def test_cylinder_audit_blow_up_exits_through_position_face(rng):
    mu = _ball_measure(rng, 300, 1.5)
    rec = evolve(mu, QUART1, FlowConfig(T=2.0, n=400))
    rings = [StarRing(1.0, 0), StarRing(1.25, 1)]
    rates = [momentum_growth_rate(QUART1, r.radius) for r in rings]
    audits = cylinder_containment_audit(rec, rings, rates)
    for a in audits:
        assert a.ok and a.position_exits
        assert all(e["radial_speed"] > 0 for e in a.position_exits)
    # halving the growth rate has to be caught
    weak = cylinder_containment_audit(rec, rings, [r / 2 for r in rates])
    assert sum(len(a.violations) for a in weak) >= 1


# escape bounds

def _quartic_tau(L, ell, X_max=1e6):
    """Time from |q| = L to X_max for the slowest start (rest at ell)."""
    return quad(lambda r: 1 / math.sqrt(2 * (r**4 - ell**4)), L, X_max, limit=200)[0]


def test_tau_trend_quartic_matches_quadrature():
    u = BoundingPotential.polynomial([0, 0, 0, 0, -1])
    taus = []
    for L in (5.0, 10.0, 20.0):
        eb = escape_bound_tau(u, L, L / 2)
        assert eb.converged and eb.worst_state == (L / 2, 0.0)
        assert eb.tau == pytest.approx(_quartic_tau(L, L / 2), rel=1e-4)
        taus.append(eb.tau)
    assert taus[0] > taus[1] > taus[2]


def test_tau_quadratic_does_not_converge():
    u = BoundingPotential.polynomial([0, 0, -1])
    eb = escape_bound_tau(u, 5.0, 2.5, horizon=40.0)
    assert not eb.converged
    # r'' = 2r from rest at 2.5: r = 2.5 cosh(sqrt2 t)
    t_exit = lambda R: math.acosh(R / 2.5) / math.sqrt(2)
    assert eb.tau == pytest.approx(t_exit(1e6) - t_exit(5.0), rel=1e-4)


def test_tau_rejects_degenerate_pair_and_uncertified_radius():
    u = BoundingPotential.polynomial([0, 0, 0, 0, -1])
    with pytest.raises(ValueError):
        escape_bound_tau(u, 5.0, 5.0)
    with pytest.raises(NoRing):
        escape_bound_tau(BoundingPotential.polynomial([0, 0, 1]), 5.0, 2.5)
