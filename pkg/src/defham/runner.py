"""Run orchestration: sample, evolve, audit, and write artifacts for one scenario."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .config import ScenarioConfig, ring_grid, sample_initial_measure
from .convergence import (SweepPlan, TimeWindow, build_mass_report, limit_mass_monotonicity,
                          paired_deviation, representation_check, weak_residual)
from .flow import RunRecord, evolve
from .model import HamiltonianModel
from .no_return import (InsufficientSampling, NoRing, cylinder_containment_audit,
                        escape_bound_tau, find_star_rings, momentum_growth_rate,
                        no_return_monitor, recheck_ring, validate_bounding_potential)
from .phase_space import SpatialBump, moment_saturated, tightness_Cr


def jsonable(obj):
    """Plain-JSON view: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return obj


def dump_json(obj, path=None) -> str:
    text = json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


@dataclass
class Audit:
    name: str
    ok: bool
    detail: dict = field(default_factory=dict)

    def as_dict(self):
        return {"name": self.name, "ok": self.ok, **self.detail}


def default_threads() -> int:
    env = os.environ.get("DEFHAM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def bump_battery(cfg: ScenarioConfig, mu0) -> list[SpatialBump]:
    """Deterministic bumps centred on initial particles (every k-th one)."""
    count = cfg.probes.tests
    if count == 0:
        return []
    idx = np.linspace(0, mu0.n - 1, count).round().astype(int)
    return [SpatialBump(mu0.x[i], cfg.probes.test_radius) for i in idx]


def record_audits(cfg: ScenarioConfig, record: RunRecord, model: HamiltonianModel, mu0
                  ) -> tuple[list[Audit], dict]:
    """All single-run audits; returns the audit list and the certificate report."""
    eps = record.cfg.eps
    audits: list[Audit] = []
    cert: dict = {"scenario": cfg.name, "eps": eps, "n": record.cfg.n}

    audits.append(Audit("run_complete", record.error is None, {"error": record.error}))

    dm = np.diff(record.mass)
    audits.append(Audit("mass_nonincreasing", bool(np.all(dm <= 0.0)),
                        {"max_rise": float(dm.max()) if dm.size else 0.0}))

    for k, a in enumerate(record.alphas):
        if a > eps:
            continue
        mom = record.moments[:, k]
        if np.any([moment_saturated(v) for v in mom]):
            audits.append(Audit(f"moment_nonincreasing[{a!r}]", True, {"saturated": True}))
            continue
        rise = np.diff(mom) - 1e-6 * mom[:-1]
        audits.append(Audit(f"moment_nonincreasing[{a!r}]", bool(np.all(rise <= 0.0)),
                            {"worst_excess": float(rise.max()) if rise.size else 0.0}))
        audits.append(pathwise_weight_audit(record, a))

    if cfg.probes.energy_rtol is not None:
        h0 = record.energy[0]
        drift = float(np.max(np.abs(record.energy - h0)))
        audits.append(Audit("energy_conservation", drift <= cfg.probes.energy_rtol * abs(h0),
                            {"max_drift": drift, "H0": float(h0)}))

    rep = representation_check(record, bump_battery(cfg, mu0) or [lambda x: np.ones(len(x))])
    audits.append(Audit("representation_bookkeeping", rep <= 1e-12, {"discrepancy": rep}))

    u = cfg.bounding_potential(mass=1.0)
    if u is not None:
        grid = ring_grid(cfg)
        bp = validate_bounding_potential(u, model, None, grid)
        cert["bounding"] = {"ok": bp.ok, "worst_margin": bp.worst_margin,
                            "worst_radius": bp.worst_radius}
        audits.append(Audit("bounding_potential", bp.ok, cert["bounding"]))
        rings = []
        if cfg.probes.rings > 0:
            found = find_star_rings(u, grid, cfg.probes.ring_rmax, cfg.probes.rings)
            rings = [r for r in found
                     if recheck_ring(u, r, cfg.probes.ring_rmax, 10 * grid.size)]
            cert["rings"] = [r.radius for r in rings]
            audits.append(Audit("ring_recheck", len(rings) == len(found),
                                {"found": [r.radius for r in found]}))
        if rings and bp.ok:
            audits.extend(ring_audits(record, model, u, rings, cert))
        if cfg.probes.tau_L:
            audits.append(tau_audit(cfg, u, cert))
        if cfg.probes.cutoff_r and rings and model.kernel.kind:
            audits.append(tightness_audit(cfg, record, model, mu0, rings[0].radius, cert))
    return audits, cert


def pathwise_weight_audit(record: RunRecord, alpha: float) -> Audit:
    """``w0 exp(-eps S_t + alpha |x_t|) <= w0 exp(alpha |x_0|)`` per particle and sample."""
    eps = record.cfg.eps
    x = np.concatenate([record.P, record.Q], axis=2)
    r = np.linalg.norm(x, axis=2)
    lhs = -eps * record.S + alpha * r
    rhs = alpha * r[0][None, :] + math.log1p(1e-6)
    bad = (lhs > rhs) & ~record.escaped
    return Audit(f"pathwise_weight[{alpha!r}]", not bad.any(), {"violations": int(bad.sum())})


def ring_audits(record: RunRecord, model, u, rings, cert) -> list[Audit]:
    out = []
    monitors = []
    bad = unresolved = crossings = 0
    for ring in rings:
        for i in range(record.n_particles):
            try:
                c = no_return_monitor(record.trajectory(i), ring, u)
            except InsufficientSampling:
                unresolved += 1
                continue
            if c.crossed:
                crossings += 1
                if not (c.monotone_ok and c.htilde_ok is not False and not c.reentered):
                    bad += 1
                    monitors.append({"ring": ring.radius, "particle": i, "t_star": c.t_star,
                                     "monotone_ok": c.monotone_ok, "htilde_ok": c.htilde_ok,
                                     "reentered": c.reentered})
    cert["no_return"] = {"crossings": crossings, "failures": monitors, "unresolved": unresolved}
    out.append(Audit("no_return_monitor", bad == 0 and unresolved == 0, cert["no_return"]))
    rates = [momentum_growth_rate(model, r.radius, 1.0) for r in rings]
    cyl = cylinder_containment_audit(record, rings, rates)
    cert["cylinders"] = [{"L": a.L, "a_star": a.a_star, "eta": a.eta, "checked": a.checked,
                          "position_exits": len(a.position_exits),
                          "unresolved_exits": len(a.unresolved_exits),
                          "violations": a.violations} for a in cyl]
    out.append(Audit("cylinder_containment", all(a.ok for a in cyl),
                     {"violations": sum(len(a.violations) for a in cyl)}))
    return out


def tau_audit(cfg: ScenarioConfig, u, cert) -> Audit:
    table = []
    ok = True
    for L in cfg.probes.tau_L:
        try:
            eb = escape_bound_tau(u, L, cfg.probes.ell_ratio * L, X_max=cfg.flow.X_max)
            table.append({"L": L, "ell": eb.ell, "tau": eb.tau, "converged": eb.converged})
        except NoRing as exc:
            table.append({"L": L, "error": str(exc)})
            ok = False
    taus = [row.get("tau") for row in table]
    if ok and len(taus) > 1:
        ok = all(b < a for a, b in zip(taus, taus[1:]))
    cert["tau_L"] = table
    return Audit("escape_bound_trend", ok, {"table": table})


def tightness_audit(cfg: ScenarioConfig, record: RunRecord, model, mu0, L, cert) -> Audit:
    """Momentum-tail interaction bound against its initial-data majorant."""
    B = model.B
    a = model.kernel.a
    Q = L - a - 1e-9
    T = record.cfg.T
    M_L = B + momentum_growth_rate(model, L, 0.0)
    qn0 = np.linalg.norm(mu0.q, axis=1)
    pn0 = np.linalg.norm(mu0.p, axis=1)
    out_q = float(np.sum(mu0.w0[qn0 >= L]))
    dirs = np.eye(model.d)
    qbars = [np.zeros(model.d)] + [s * Q * dirs[k] for s in (0.5, 1.0) for k in range(model.d)]
    rows = []
    ok = True
    for r in cfg.probes.cutoff_r:
        r_star = r - 1.0 - M_L * T
        bound = B * (out_q + float(np.sum(mu0.w0[pn0 > r_star])))
        worst = 0.0
        for j in range(record.times.size):
            mu = record.measure(record.grid_index(record.times[j]))
            for qb in qbars:
                worst = max(worst, tightness_Cr(mu, r, qb, model.kernel.grad, record.cfg.eps))
        rows.append({"r": r, "r_star": r_star, "bound": bound, "max_Cr": worst})
        ok &= worst <= bound
    cert["tightness"] = rows
    return Audit("tightness", bool(ok), {"rows": rows})


@dataclass
class RunOutcome:
    ok: bool
    audits: list
    summary: dict
    record: RunRecord | None = None
    certificates: dict | None = None


def prepare_output(directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_text("")
    probe.unlink()
    return out


def execute_run(cfg: ScenarioConfig, out_dir=None, threads: int = 1) -> RunOutcome:
    kernels.set_threads(threads)
    out = prepare_output(out_dir or cfg.outputs.directory)
    model = cfg.model()
    mu0 = sample_initial_measure(cfg.sampler, cfg.d)
    fcfg = cfg.flow_config()
    record = evolve(mu0, model, fcfg, alphas=cfg.probes.alphas, substeps=cfg.flow.substeps)
    audits, cert = record_audits(cfg, record, model, mu0)
    cert["audits"] = [a.as_dict() for a in audits]
    ok = all(a.ok for a in audits)
    summary = {
        "scenario": cfg.name, "eps": fcfg.eps, "n": fcfg.n, "T": fcfg.T, "N": mu0.n,
        "backend": kernels.BACKEND_NAME, "final_mass": float(record.mass[-1]),
        "escaped": int(record.n_escaped[-1]),
        "violations": sum(len(c["violations"]) for c in cert.get("cylinders", [])),
        "failed_audits": [a.name for a in audits if not a.ok], "ok": ok,
    }
    fmts = cfg.outputs.formats
    if "csv" in fmts:
        record.to_csv(out / "record.csv")
        record.snapshot_csv(-1, out / "snapshot_final.csv")
    if "npz" in fmts:
        record.save_npz(out / "trajectories.npz")
    if "json" in fmts:
        dump_json(cert, out / "certificates.json")
        dump_json(summary, out / "summary.json")
    if cfg.source:
        (out / "scenario.toml").write_text(Path(cfg.source).read_text())
    return RunOutcome(ok, audits, summary, record, cert)


def execute_sweep(cfg: ScenarioConfig, out_dir=None, threads: int = 1) -> RunOutcome:
    """eps sweep at the finest n, then n refinement at ``flow.eps``."""
    out = prepare_output(out_dir or cfg.outputs.directory)
    model = cfg.model()
    mu0 = sample_initial_measure(cfg.sampler, cfg.d)
    f = cfg.flow
    audits: list[Audit] = []
    summary: dict = {"scenario": cfg.name}
    n_fine = f.n_list[-1] if f.n_list else f.n
    workers = max(1, threads)
    kernels.set_threads(max(1, threads // workers))

    def job(eps, n):
        rec = evolve(mu0, model, cfg.flow_config(eps=eps, n=n), substeps=f.substeps)
        if rec.error is not None:
            raise RuntimeError(f"run with eps={eps!r}, n={n} failed: {rec.error}")
        return rec

    if f.eps_list:
        times = cfg.probes.times or tuple(np.linspace(f.T / 4, f.T, 4))
        plan = SweepPlan(tuple(f.eps_list), (n_fine,), tuple(times), T=f.T, ode_tol=f.ode_tol,
                         X_max=f.X_max, h_min=f.h_min, substeps=f.substeps, seed=cfg.sampler.seed)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            recs = list(pool.map(lambda e: job(e, n_fine), plan.eps))
        report = build_mass_report(plan.eps, plan.probe_times, recs)
        if "csv" in cfg.outputs.formats:
            report.to_csv(out / "mass_sweep.csv")
        summary["mass"] = report.summary()
        audits.append(Audit("mass_in_unit_interval", bool(np.all((report.masses >= 0)
                                                                  & (report.masses <= 1)))))
        audits.append(Audit("mass_nonincreasing_in_t", bool(np.all(report.monotone_in_t))))
        if report.times.size >= 3 and report.eps.size >= 2:
            mono = limit_mass_monotonicity(report)
            audits.append(Audit("limit_mass_monotone", mono.ok,
                                {"failures": mono.failures, "slack": mono.slack}))
    if len(f.n_list) >= 2:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            recs = list(pool.map(lambda n: job(f.eps, n), f.n_list))
        devs = [paired_deviation(a, b, f.X_max, f.T) for a, b in zip(recs, recs[1:])]
        battery = bump_battery(cfg, mu0)
        window = TimeWindow(0.0, f.T)
        resid = [[weak_residual(r, model, phi, window) for phi in battery] for r in recs]
        rows = [{"n": n, "max_weak_residual": max(res) if res else 0.0}
                for n, res in zip(f.n_list, resid)]
        for k, d in enumerate(devs):
            rows[k + 1]["deviation_from_previous"] = d.deviation
        summary["refinement"] = rows
        dv = [d.deviation for d in devs]
        if model.kernel.kind == 0:
            # the field does not depend on the ensemble: only integrator noise remains
            ok = all(v <= 2.0 * f.ode_tol * f.T for v in dv)
        else:
            ok = all(b < a for a, b in zip(dv, dv[1:]))
        audits.append(Audit("refinement_closeness", ok, {"deviations": dv}))
        if "csv" in cfg.outputs.formats:
            lines = ["n,max_weak_residual,deviation_from_previous"]
            for row in rows:
                lines.append(",".join([str(row["n"]), repr(float(row["max_weak_residual"])),
                                       repr(float(row.get("deviation_from_previous", math.nan)))]))
            (out / "refinement.csv").write_text("\n".join(lines) + "\n")
    ok = all(a.ok for a in audits)
    summary["audits"] = [a.as_dict() for a in audits]
    summary["failed_audits"] = [a.name for a in audits if not a.ok]
    summary["ok"] = ok
    if "json" in cfg.outputs.formats:
        dump_json(summary, out / "sweep_summary.json")
    return RunOutcome(ok, audits, summary)


def audit_directory(run_dir, config_path=None) -> RunOutcome:
    """Re-run every single-run audit on a stored run directory."""
    from .config import load_config

    run_dir = Path(run_dir)
    cfg = load_config(config_path or run_dir / "scenario.toml")
    record = RunRecord.load_npz(run_dir / "trajectories.npz")
    model = cfg.model()
    mu0 = sample_initial_measure(cfg.sampler, cfg.d, seed=record.cfg.seed)
    audits, cert = record_audits(cfg, record, model, mu0)
    cert["audits"] = [a.as_dict() for a in audits]
    dump_json(cert, run_dir / "certificates.json")
    ok = all(a.ok for a in audits)
    summary = {"scenario": cfg.name, "ok": ok,
               "failed_audits": [a.name for a in audits if not a.ok]}
    return RunOutcome(ok, audits, summary, record, cert)
