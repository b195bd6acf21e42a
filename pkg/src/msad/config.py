"""Strict TOML configuration for runs and experiments.

Every section and key is optional unless noted; unknown keys are rejected so
that a typo cannot silently change an experiment.  Example::

    [model]
    d = 3
    s = 1.0
    a = [[0.05, -0.03], [-0.03, 0.05]]
    sigma = [1.0, 1.0]
    width = 2.0
    T = 0.5

    [grid]
    m = 48
    L = 12.0

    [particles]
    ell = 0.1
    N = 1024
    seed = 1

    [experiment]
    kind = "coupling"
    N_list = [256, 1024, 4096]
    lambda = 0.2
    reps = 50
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class ModelSection:
    d: int = 3
    s: float = 1.0
    a: list = field(default_factory=lambda: [[0.05, -0.03], [-0.03, 0.05]])
    sigma: list = field(default_factory=lambda: [1.0, 1.0])
    width: float = 2.0
    center: list | None = None
    cutoff: float | None = 5.0
    T: float = 0.5


@dataclass
class GridSection:
    m: int = 48
    L: float = 12.0


@dataclass
class ParticleSection:
    ell: float = 0.1
    N: int = 1024
    dt: float | None = None
    seed: int = 0
    n_outputs: int = 2
    kernel_points: int = 2048


@dataclass
class PdeSection:
    eps: float | None = None
    dt: float = 0.01
    mollified: bool = True
    n_outputs: int = 12


@dataclass
class ExperimentSection:
    kind: str = "pde-error"
    eps_list: list = field(default_factory=lambda: [0.4, 0.2, 0.1])
    N_list: list = field(default_factory=lambda: [256, 1024, 4096])
    lam: float = 0.2
    theta: float = 0.3
    reps: int = 50
    psi: str = "grad"
    species: int = 0
    improved_rate: bool = False


SECTIONS = {
    "model": ModelSection,
    "grid": GridSection,
    "particles": ParticleSection,
    "pde": PdeSection,
    "experiment": ExperimentSection,
}
# TOML spelling of keys that are Python keywords
ALIASES = {("experiment", "lambda"): "lam"}
EXPERIMENT_KINDS = ("pde-error", "coupling", "marginal", "lln")


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    grid: GridSection = field(default_factory=GridSection)
    particles: ParticleSection = field(default_factory=ParticleSection)
    pde: PdeSection = field(default_factory=PdeSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    text: str = ""

    # builders -----------------------------------------------------------
    @property
    def n(self):
        return len(self.model.a)

    def riesz(self):
        from .kernels import RieszSpec

        return RieszSpec(float(self.model.s), int(self.model.d))

    def grid_obj(self):
        from .pde import Grid

        return Grid(int(self.model.d), int(self.grid.m), float(self.grid.L))

    def center(self):
        c = np.zeros(self.model.d) if self.model.center is None else np.asarray(self.model.center, dtype=float)
        return c

    def species(self):
        from .particles import SpeciesConfig

        c = tuple(self.center())
        return [SpeciesConfig(float(sg), c, float(self.model.width), self.model.cutoff) for sg in self.sigma_vec()]

    def sigma_vec(self):
        sg = np.atleast_1d(np.asarray(self.model.sigma, dtype=float))
        if sg.size == 1:
            sg = np.repeat(sg, self.n)
        return sg

    def a_matrix(self):
        return np.asarray(self.model.a, dtype=float)

    def initial_fields(self, grid=None):
        from .pde import gaussian_density

        grid = grid or self.grid_obj()
        f = gaussian_density(grid, self.center(), float(self.model.width), self.model.cutoff)
        return np.stack([f] * self.n)

    def sim_config(self, N=None, seed=None, n_outputs=None):
        from .kernels import MollifierSpec
        from .particles import SimConfig

        p = self.particles
        N = int(p.N if N is None else N)
        return SimConfig(N, self.riesz(), MollifierSpec(float(p.ell), N, int(self.model.d)), self.a_matrix(),
                         self.species(), float(self.model.T), p.dt, int(p.seed if seed is None else seed),
                         float(self.grid.L), int(p.n_outputs if n_outputs is None else n_outputs))

    def pde_config(self, eps=None, output_times=None, n_outputs=None):
        from .pde import PdeConfig

        grid = self.grid_obj()
        return PdeConfig(grid, self.riesz(), self.a_matrix(), self.sigma_vec(), self.initial_fields(grid),
                         float(self.model.T), float(self.pde.dt), eps, output_times,
                         int(self.pde.n_outputs if n_outputs is None else n_outputs))

    def table(self, eps):
        from .kernels import MollifierSpec, build_kernel_table

        return build_kernel_table(self.riesz(), MollifierSpec.from_epsilon(eps, int(self.model.d)),
                                  int(self.particles.kernel_points), r_max=8.0 * float(self.grid.L))


def _fill(section_name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section_name}] must be a table", "config-syntax")
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        attr = ALIASES.get((section_name, key), key)
        if attr not in names or (attr != key and key in names):
            raise ConfigError(f"unknown key '{key}' in [{section_name}]", "config-unknown-key")
        kwargs[attr] = val
    return cls(**kwargs)


def parse_config_text(text: str) -> RunConfig:
    """Parse and validate a configuration document."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}", "config-syntax") from exc
    parts = {}
    for name, val in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", "config-unknown-key")
        parts[name] = _fill(name, SECTIONS[name], val)
    cfg = RunConfig(**parts, text=text)
    validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file {path} does not exist", "config-missing")
    return parse_config_text(path.read_text())


def validate(cfg: RunConfig):
    """Check every documented constraint; raise :class:`ConfigError` naming it."""
    from .harness import valid_ranges
    from .particles import dt_cap

    m = cfg.model
    riesz = cfg.riesz()
    a = cfg.a_matrix()
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1 or not np.all(np.isfinite(a)):
        raise ConfigError("model.a must be a finite square matrix", "interaction")
    sg = cfg.sigma_vec()
    if sg.size != cfg.n or np.any(sg <= 0):
        raise ConfigError("model.sigma needs one positive value per species", "sigma")
    if m.center is not None and len(m.center) != m.d:
        raise ConfigError("model.center must have d entries", "init-center")
    if not m.width > 0:
        raise ConfigError("model.width must be positive", "init-width")
    if not m.T > 0:
        raise ConfigError("model.T must be positive", "T")
    cfg.grid_obj()
    if m.width * 6 > cfg.grid.L:
        raise ConfigError(f"box half-width L={cfg.grid.L} is below 6 initial widths ({6 * m.width})", "box-size")
    p = cfg.particles
    lo, hi = valid_ranges(p.ell, riesz.s, riesz.d, strict=False)["ell_range"]
    if not lo < p.ell < hi:
        raise ConfigError(f"ell={p.ell} outside the admissible interval ({lo:g}, {hi:.6g}) = (0, 1/(2s+4))",
                          "ell-range")
    if p.kernel_points < 64:
        raise ConfigError("particles.kernel_points must be >= 64", "table-points")
    e = cfg.experiment
    if e.kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment.kind must be one of {EXPERIMENT_KINDS}", "experiment-kind")
    N_values = [p.N] + (list(e.N_list) if e.kind in ("coupling", "marginal", "lln") else [])
    if p.dt is not None:
        for N in N_values:
            cap = dt_cap(N ** (-p.ell), riesz.s)
            if p.dt > cap:
                raise ConfigError(f"particles.dt={p.dt:g} exceeds the cap 0.1*eps^(s+2)={cap:.6g} at N={N}", "dt-cap")
    if e.kind == "coupling":
        lam_lo, lam_hi = valid_ranges(p.ell, riesz.s, riesz.d, strict=False)["lambda_range"]
        if not lam_lo < e.lam < lam_hi:
            raise ConfigError(f"lambda={e.lam} outside the admissible interval ({lam_lo:.6g}, {lam_hi:.6g})",
                              "lambda-range")
    if not 0 <= e.theta < 0.5:
        raise ConfigError(f"theta={e.theta} must lie in [0, 1/2)", "theta-range")
    if e.psi not in ("grad", "K"):
        raise ConfigError("experiment.psi must be 'grad' or 'K'", "lln-psi")
    if not 0 <= e.species < cfg.n:
        raise ConfigError("experiment.species out of range", "species")
    if e.reps < 1:
        raise ConfigError("experiment.reps must be positive", "reps")
    return cfg
