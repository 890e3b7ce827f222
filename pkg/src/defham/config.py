"""Scenario files: TOML text with a fixed set of sections.

Grammar (all sections optional except ``[sampler]`` and ``[flow]``)::

    name = "harmonic-confined"
    d = 2

    [kernel]        family = "none" | "bump";  a = 1.0;  amplitude = 1.0
    [potential]     family = "power";  k2 = 1.0 (or one per axis);  k4 = 0.0;  gamma = 4.0
    [bounding]      family = "auto" | "poly" | "none";  coeffs = [...] (poly);  B = 0.0 (poly)
    [sampler]       family = "gaussian" | "ball" | "lattice";  N;  seed;  alpha0
                    gaussian: sigma_p, sigma_q, mean_p, mean_q, speed (optional |p|)
                    ball: radius, center;  lattice: extent (half-width of the cube)
    [flow]          eps;  eps_list;  T;  n;  n_list;  ode_tol;  X_max;  h_min;  substeps
    [probes]        times;  alphas;  rings;  ring_step;  ring_rmax;  ell_ratio;  tau_L;
                    tests (bump count);  test_radius;  cutoff_r;  energy_rtol
    [outputs]       directory;  formats = ["csv", "npz", "json"]
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .flow import FlowConfig
from .model import BumpKernel, HamiltonianModel, PowerPotential, ZeroKernel
from .no_return import BoundingPotential
from .phase_space import ParticleMeasure, exp_moment, moment_saturated


class ParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        where = f" (line {line}, column {col})" if line is not None else ""
        super().__init__(msg + where)
        self.line = line
        self.col = col


class ValidationError(ValueError):
    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in errors))

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.errors]


class SaturatedMoment(ArithmeticError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    family: str = "none"
    a: float = 1.0
    amplitude: float = 1.0


@dataclass(frozen=True)
class PotentialSpec:
    family: str = "power"
    k2: float | tuple = 0.0
    k4: float = 0.0
    gamma: float = 4.0


@dataclass(frozen=True)
class BoundingSpec:
    family: str = "auto"
    coeffs: tuple = ()
    B: float = 0.0


@dataclass(frozen=True)
class SamplerSpec:
    family: str = "gaussian"
    N: int = 100
    seed: int = 0
    alpha0: float = 0.0
    sigma_p: float = 1.0
    sigma_q: float = 1.0
    mean_p: tuple = ()
    mean_q: tuple = ()
    speed: float | None = None
    radius: float = 1.0
    center: tuple = ()
    extent: float = 1.0


@dataclass(frozen=True)
class FlowSpec:
    eps: float = 0.0
    eps_list: tuple = ()
    T: float = 1.0
    n: int = 10
    n_list: tuple = ()
    ode_tol: float = 1e-10
    X_max: float = 1e6
    h_min: float | None = None
    substeps: int = 1


@dataclass(frozen=True)
class ProbeSpec:
    times: tuple = ()
    alphas: tuple = ()
    rings: int = 0
    ring_step: float = 0.5
    ring_rmax: float = 50.0
    ell_ratio: float = 0.5
    tau_L: tuple = ()
    tests: int = 5
    test_radius: float = 1.0
    cutoff_r: tuple = ()
    energy_rtol: float | None = None


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "out"
    formats: tuple = ("csv", "npz", "json")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    d: int
    kernel: KernelSpec = field(default_factory=KernelSpec)
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    bounding: BoundingSpec = field(default_factory=BoundingSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    flow: FlowSpec = field(default_factory=FlowSpec)
    probes: ProbeSpec = field(default_factory=ProbeSpec)
    outputs: OutputSpec = field(default_factory=OutputSpec)
    source: str | None = None

    def model(self) -> HamiltonianModel:
        k = self.kernel
        kern = ZeroKernel() if k.family == "none" else BumpKernel(k.a, k.amplitude)
        p = self.potential
        return HamiltonianModel(PowerPotential(p.k2, p.k4, p.gamma), kern, self.d)

    def bounding_potential(self, mass: float = 1.0) -> BoundingPotential | None:
        b = self.bounding
        if b.family == "none":
            return None
        if b.family == "auto":
            return BoundingPotential.from_model(self.model(), mass)
        return BoundingPotential.polynomial(b.coeffs, b.B)

    def flow_config(self, eps: float | None = None, n: int | None = None,
                    seed: int | None = None) -> FlowConfig:
        f = self.flow
        return FlowConfig(eps=f.eps if eps is None else eps, T=f.T, n=f.n if n is None else n,
                          ode_tol=f.ode_tol, X_max=f.X_max, h_min=f.h_min,
                          seed=self.sampler.seed if seed is None else seed)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, sampler=replace(self.sampler, seed=seed))


_SECTIONS = {
    "kernel": KernelSpec, "potential": PotentialSpec, "bounding": BoundingSpec,
    "sampler": SamplerSpec, "flow": FlowSpec, "probes": ProbeSpec, "outputs": OutputSpec,
}
_KNOWN = {"kernel": ("none", "bump"), "potential": ("power",),
          "bounding": ("auto", "poly", "none"), "sampler": ("gaussian", "ball", "lattice")}


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_type(path, value, default, errors):
    """Coerce a TOML value to the type implied by the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append((path, "expected a boolean"))
        return value
    if isinstance(default, tuple):
        if _num(value):
            return (value,)
        if not isinstance(value, list):
            errors.append((path, "expected a list"))
            return default
        return tuple(value)
    if isinstance(default, int) and path.rsplit(".", 1)[-1] in ("N", "n", "seed", "d", "rings",
                                                                 "tests", "substeps"):
        if not isinstance(value, int) or isinstance(value, bool):
            errors.append((path, "expected an integer"))
            return default
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, list) and path.endswith("k2"):
            return tuple(value)
        if not _num(value):
            errors.append((path, "expected a number"))
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            errors.append((path, "expected a string"))
            return default
    return value


def parse_config(text: str, source: str | None = None) -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        col = getattr(exc, "colno", None)
        if line is None:
            m = re.search(r"line (\d+), column (\d+)", str(exc))
            if m:
                line, col = int(m.group(1)), int(m.group(2))
        raise ParseError(str(exc).split(" (at line")[0], line, col) from None
    return build_config(raw, source)


def build_config(raw: dict, source: str | None = None) -> ScenarioConfig:
    """Validate a parsed mapping; every problem is collected before raising."""
    errors: list[tuple[str, str]] = []
    name = raw.get("name", "scenario")
    d = raw.get("d", 1)
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        errors.append(("d", "must be a positive integer"))
        d = 1
    for key in raw:
        if key not in _SECTIONS and key not in ("name", "d"):
            errors.append((key, "unknown key"))
    for req in ("sampler", "flow"):
        if req not in raw:
            errors.append((req, "section is required"))
    parts = {}
    for sec, cls in _SECTIONS.items():
        body = raw.get(sec, {})
        if not isinstance(body, dict):
            errors.append((sec, "must be a table"))
            body = {}
        defaults = cls()
        kwargs = {}
        for key, val in body.items():
            path = f"{sec}.{key}"
            if not hasattr(defaults, key):
                errors.append((path, "unknown key"))
                continue
            kwargs[key] = _check_type(path, val, getattr(defaults, key), errors)
        if sec == "sampler" and "speed" in kwargs and kwargs["speed"] is not None:
            kwargs["speed"] = float(kwargs["speed"])
        parts[sec] = cls(**kwargs)
    cfg = ScenarioConfig(str(name), d, source=source, **parts)
    errors.extend(_validate(cfg))
    if errors:
        raise ValidationError(errors)
    return cfg


def _strict(seq, decreasing: bool) -> bool:
    return all((b < a) if decreasing else (b > a) for a, b in zip(seq, seq[1:]))


def _validate(cfg: ScenarioConfig) -> list[tuple[str, str]]:
    e = []
    for sec, allowed in _KNOWN.items():
        fam = getattr(cfg, sec).family
        if fam not in allowed:
            e.append((f"{sec}.family", f"unknown family {fam!r}; expected one of {allowed}"))
    k = cfg.kernel
    if k.family == "bump" and not k.a > 0:
        e.append(("kernel.a", "must be > 0"))
    p = cfg.potential
    k2 = np.atleast_1d(np.asarray(p.k2, dtype=float))
    if k2.size not in (1, cfg.d):
        e.append(("potential.k2", f"needs 1 or {cfg.d} entries"))
    if p.k4 != 0 and p.gamma < 2:
        e.append(("potential.gamma", "must be >= 2"))
    b = cfg.bounding
    if b.family == "poly" and not b.coeffs:
        e.append(("bounding.coeffs", "required for the poly family"))
    if b.family == "auto" and k2.size > 1 and not np.all(k2 == k2[0]):
        e.append(("bounding.family", "auto needs a radially symmetric potential"))
    s = cfg.sampler
    if s.N < 1:
        e.append(("sampler.N", "must be >= 1"))
    if s.alpha0 < 0:
        e.append(("sampler.alpha0", "must be >= 0"))
    for key in ("mean_p", "mean_q"):
        v = getattr(s, key)
        if v and len(v) != cfg.d:
            e.append((f"sampler.{key}", f"needs {cfg.d} entries"))
    if s.center and len(s.center) != 2 * cfg.d:
        e.append(("sampler.center", f"needs {2 * cfg.d} entries"))
    if s.family == "lattice" and s.N >= 1:
        m = round(s.N ** (1.0 / (2 * cfg.d)))
        if m ** (2 * cfg.d) != s.N:
            e.append(("sampler.N", f"lattice needs N = m^{2 * cfg.d} for an integer m"))
    if s.speed is not None and not s.speed >= 0:
        e.append(("sampler.speed", "must be >= 0"))
    for key in ("sigma_p", "sigma_q", "radius", "extent"):
        if not getattr(s, key) >= 0:
            e.append((f"sampler.{key}", "must be >= 0"))
    f = cfg.flow
    if not f.eps >= 0:
        e.append(("flow.eps", "must be >= 0"))
    if f.eps_list:
        if not _strict(f.eps_list, True):
            e.append(("flow.eps_list", "not strictly decreasing"))
        if any(not x > 0 for x in f.eps_list):
            e.append(("flow.eps_list", "entries must be > 0"))
    if not f.n >= 1:
        e.append(("flow.n", "must be >= 1"))
    if f.n_list:
        if not _strict(f.n_list, False):
            e.append(("flow.n_list", "not strictly increasing"))
        if any(not (isinstance(x, int) and x >= 1) for x in f.n_list):
            e.append(("flow.n_list", "entries must be positive integers"))
    if not f.T > 0:
        e.append(("flow.T", "must be > 0"))
    if not f.ode_tol > 0:
        e.append(("flow.ode_tol", "must be > 0"))
    if not f.X_max > 0:
        e.append(("flow.X_max", "must be > 0"))
    if f.h_min is not None and not f.h_min > 0:
        e.append(("flow.h_min", "must be > 0"))
    if f.substeps < 1:
        e.append(("flow.substeps", "must be >= 1"))
    pr = cfg.probes
    if any(not (0 < t <= f.T) for t in pr.times):
        e.append(("probes.times", "must lie in (0, T]"))
    if any(a < 0 for a in pr.alphas):
        e.append(("probes.alphas", "must be >= 0"))
    if pr.rings < 0:
        e.append(("probes.rings", "must be >= 0"))
    if not pr.ring_step > 0:
        e.append(("probes.ring_step", "must be > 0"))
    if not 0 < pr.ell_ratio < 1:
        e.append(("probes.ell_ratio", "must lie in (0, 1)"))
    if any(not r > 1 for r in pr.cutoff_r):
        e.append(("probes.cutoff_r", "entries must be > 1"))
    if pr.tests < 0:
        e.append(("probes.tests", "must be >= 0"))
    bad = [x for x in cfg.outputs.formats if x not in ("csv", "npz", "json")]
    if bad:
        e.append(("outputs.formats", f"unknown formats {bad}"))
    return e


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def _generator(seed: int) -> np.random.Generator:
    # Philox is counter-based, so the stream depends only on the key
    return np.random.Generator(np.random.Philox(key=int(seed)))


def sample_initial_measure(spec: SamplerSpec, d: int, seed: int | None = None) -> ParticleMeasure:
    """Draw ``N`` equally weighted particles (total mass 1) from the configured family."""
    seed = spec.seed if seed is None else seed
    N = spec.N
    D = 2 * d
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = _generator(seed)
    if spec.family == "gaussian":
        mp = np.asarray(spec.mean_p or (0.0,) * d, dtype=float)
        mq = np.asarray(spec.mean_q or (0.0,) * d, dtype=float)
        z = rng.standard_normal((N, D))
        p = mp + spec.sigma_p * z[:, :d]
        q = mq + spec.sigma_q * z[:, d:]
        if spec.speed is not None:
            nrm = np.linalg.norm(z[:, :d], axis=1, keepdims=True)
            nrm[nrm == 0] = 1.0
            p = spec.speed * z[:, :d] / nrm
    elif spec.family == "ball":
        g = rng.standard_normal((N, D))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        rad = spec.radius * rng.random(N) ** (1.0 / D)
        x = g * rad[:, None] + np.asarray(spec.center or (0.0,) * D, dtype=float)
        p, q = x[:, :d], x[:, d:]
    elif spec.family == "lattice":
        m = round(N ** (1.0 / D))
        if m**D != N:
            raise ValueError(f"lattice needs N = m^{D}")
        ax = (np.arange(m) + 0.5) / m * 2.0 * spec.extent - spec.extent
        mesh = np.stack(np.meshgrid(*([ax] * D), indexing="ij"), axis=-1).reshape(N, D)
        p, q = mesh[:, :d], mesh[:, d:]
    else:
        raise ValueError(f"unknown sampler family {spec.family!r}")
    mu = ParticleMeasure(np.ascontiguousarray(p), np.ascontiguousarray(q), np.full(N, 1.0 / N),
                         np.zeros(N), np.zeros(N, bool), np.full(N, np.nan))
    if spec.alpha0 > 0 and moment_saturated(exp_moment(mu, spec.alpha0, 0.0)):
        raise SaturatedMoment(f"exponential moment of order {spec.alpha0} is not finite "
                              "for this sample")
    return mu


def config_summary(cfg: ScenarioConfig) -> dict:
    return {"name": cfg.name, "d": cfg.d, "kernel": cfg.kernel.family,
            "potential": {"k2": cfg.potential.k2, "k4": cfg.potential.k4,
                          "gamma": cfg.potential.gamma},
            "N": cfg.sampler.N, "seed": cfg.sampler.seed, "eps": cfg.flow.eps,
            "T": cfg.flow.T, "n": cfg.flow.n}


def ring_grid(cfg: ScenarioConfig) -> np.ndarray:
    pr = cfg.probes
    m = int(math.floor(pr.ring_rmax / pr.ring_step + 1e-9))
    return np.arange(m + 1) * pr.ring_step
