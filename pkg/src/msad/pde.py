"""Aggregation-diffusion systems on a periodic box.

Solves, for species ``alpha = 1..n``,

    d_t f_alpha = sum_beta a[alpha, beta] div(f_alpha grad(W * f_beta)) + sigma_alpha Lap f_alpha

with ``W = V * chi_eps`` (intermediate system) or ``W = V`` (limiting system)
on ``[-L, L)^d`` with periodic boundaries.  Time stepping is Strang splitting:
diffusion by the exact exponential of the finite-difference Laplacian in
Fourier space, advection by an SSP-RK2 finite-volume step with van Leer
limited upwind fluxes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import special

from .errors import ConfigError, InstabilityError, InvariantViolation
from .kernels import RieszSpec, mollifier_fourier

log = logging.getLogger(__name__)

MASS_DRIFT_TOL = 1e-12
CLIP_STEP_TOL = 1e-6
CLIP_TOTAL_TOL = 1e-3
CFL = 0.5
MAX_SUBSTEPS = 4096


def _smooth_size(m):
    for p in (2, 3, 5):
        while m % p == 0:
            m //= p
    return m == 1


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on ``[-L, L)^d`` with ``m`` nodes per axis."""

    d: int
    m: int
    L: float

    def __post_init__(self):
        if self.m < 32 or self.m % 2 or not _smooth_size(self.m):
            raise ConfigError(f"m={self.m} must be an even integer >= 32 with no prime factor above 5",
                              "grid-m")
        if not self.L > 0:
            raise ConfigError("L must be positive", "grid-L")

    @property
    def h(self):
        return 2.0 * self.L / self.m

    @property
    def shape(self):
        return (self.m,) * self.d

    @property
    def cell_volume(self):
        return self.h ** self.d

    def nodes(self):
        return -self.L + self.h * np.arange(self.m)

    def coords(self):
        """Node coordinates, shape ``(d, m, ..., m)``."""
        return np.stack(np.meshgrid(*([self.nodes()] * self.d), indexing="ij"))

    def offsets(self):
        """Minimum-image displacements from node 0, FFT ordering, shape ``(d, m, ..., m)``."""
        j = np.arange(self.m)
        o = np.where(j < self.m // 2, j, j - self.m) * self.h
        return np.stack(np.meshgrid(*([o] * self.d), indexing="ij"))

    def wavenumbers(self):
        """Angular wavenumbers for an ``rfftn`` layout, one array per axis (broadcastable)."""
        ks = []
        for ax in range(self.d):
            if ax == self.d - 1:
                k = 2 * np.pi * sfft.rfftfreq(self.m, d=self.h)
            else:
                k = 2 * np.pi * sfft.fftfreq(self.m, d=self.h)
            shp = [1] * self.d
            shp[ax] = k.size
            ks.append(k.reshape(shp))
        return ks


@dataclass
class DensityField:
    """Per-species grid densities at one time; ``values`` has shape ``(n, m, ..., m)``."""

    values: np.ndarray
    t: float
    grid: Grid

    @property
    def n(self):
        return self.values.shape[0]

    def masses(self):
        return self.values.reshape(self.n, -1).sum(axis=1) * self.grid.cell_volume


@dataclass
class Timeline:
    """Solver output: fields at increasing times plus run diagnostics."""

    fields: list
    clipped_mass: float = 0.0
    max_substeps: int = 1
    boundary_mass: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def times(self):
        return np.array([f.t for f in self.fields])


def gaussian_density(grid: Grid, center=None, width=1.0, cutoff=5.0):
    """Isotropic Gaussian (std ``width``) truncated at ``cutoff * width``, unit discrete mass.

    ``cutoff=None`` gives the periodized, untruncated Gaussian.
    """
    center = np.zeros(grid.d) if center is None else np.asarray(center, dtype=float)
    if width <= 0:
        raise ConfigError("Gaussian width must be positive", "init-width")
    x = grid.coords()
    if cutoff is None:
        # sum over periodic images; 3 image shells suffice for width <= L
        vals = np.zeros(grid.shape)
        shift = range(-3, 4)
        per_axis = []
        for ax in range(grid.d):
            acc = np.zeros(grid.m)
            xs = grid.nodes() - center[ax]
            for k in shift:
                acc += np.exp(-0.5 * ((xs + 2 * grid.L * k) / width) ** 2)
            per_axis.append(acc)
        vals = per_axis[0]
        for ax in range(1, grid.d):
            vals = np.multiply.outer(vals, per_axis[ax])
    else:
        r2 = np.sum((x - center.reshape((-1,) + (1,) * grid.d)) ** 2, axis=0)
        vals = np.exp(-0.5 * r2 / width**2)
        vals[r2 > (cutoff * width) ** 2] = 0.0
    return vals / (vals.sum() * grid.cell_volume)


def heat_solution(grid: Grid, center, width, sigma, t):
    """Periodized Gaussian solving ``u_t = sigma Lap u`` from an untruncated Gaussian."""
    return gaussian_density(grid, center, math.sqrt(width**2 + 2 * sigma * t), cutoff=None)


# ----------------------------------------------------------------------------
# Interaction kernels

def raw_gradient_kernel(grid: Grid, s):
    """``grad |x|^{-s}`` sampled at minimum-image offsets, shape ``(d, m, ..., m)``.

    The origin cell carries the cell average of the odd singular field, which
    is zero; samples with ``|x| >= L`` are dropped so the periodized kernel is
    a spherical truncation and stays odd.
    """
    x = grid.offsets()
    r2 = np.sum(x * x, axis=0)
    keep = (r2 > 0) & (r2 < grid.L**2)
    c = np.zeros_like(r2)
    c[keep] = -s * r2[keep] ** (-(s + 2) / 2)
    return c[None] * x


def _mollifier_symbol(grid: Grid, eps):
    # chi_hat(eps |k|) evaluated once per distinct |k|
    j = np.arange(grid.m)
    sq = [np.minimum(j, grid.m - j) ** 2 for _ in range(grid.d - 1)]
    sq.append(np.arange(grid.m // 2 + 1) ** 2)
    tot = np.zeros([a.size for a in sq], dtype=np.int64)
    for ax, a in enumerate(sq):
        shp = [1] * grid.d
        shp[ax] = a.size
        tot = tot + a.reshape(shp)
    uniq, inv = np.unique(tot, return_inverse=True)
    kap = np.sqrt(uniq) * (np.pi / grid.L) * eps
    return mollifier_fourier(kap, grid.d)[inv].reshape(tot.shape)


def gradient_kernel_hat(grid: Grid, s, eps=None):
    """Fourier transform of the (optionally mollified) gradient kernel, scaled by ``h^d``.

    The mollified kernel is the raw sampled kernel filtered by the mollifier's
    Fourier transform at ``eps |k|``.
    """
    K = raw_gradient_kernel(grid, s)
    axes = tuple(range(1, grid.d + 1))
    Kh = sfft.rfftn(K, axes=axes) * grid.cell_volume
    if eps is not None:
        Kh *= _mollifier_symbol(grid, eps)[None]
    return Kh


def convolve_gradient(values, kernel_hat, grid: Grid):
    """``(grad W * f)`` on the grid for one species' values; shape ``(d, m, ..., m)``."""
    F = sfft.rfftn(values)
    return sfft.irfftn(kernel_hat * F[None], s=grid.shape, axes=tuple(range(1, grid.d + 1)))


def velocity_fields(values, kernel_hat, a, grid: Grid):
    """``u_alpha = -sum_beta a[alpha, beta] grad W * f_beta``; shape ``(n, d, m, ..., m)``."""
    n = values.shape[0]
    axes = tuple(range(1, grid.d + 1))
    F = [sfft.rfftn(values[b]) for b in range(n)]
    out = np.empty((n, grid.d) + grid.shape)
    for al in range(n):
        acc = np.zeros(kernel_hat.shape, dtype=complex)
        for b in range(n):
            if a[al][b] != 0.0:
                acc -= a[al][b] * kernel_hat * F[b][None]
        out[al] = sfft.irfftn(acc, s=grid.shape, axes=axes)
    return out


# ----------------------------------------------------------------------------
# Stepper

def _van_leer(dl, dr):
    prod = dl * dr
    with np.errstate(invalid="ignore", divide="ignore"):
        lim = np.where(prod > 0, 2.0 * prod / (dl + dr), 0.0)
    return lim


def advection_rhs(f, u, h):
    """``-div(f u)`` by limited upwind finite volumes; ``f`` is ``(m,...)``, ``u`` is ``(d, m, ...)``."""
    out = np.zeros_like(f)
    for ax in range(f.ndim):
        fp = np.roll(f, -1, axis=ax)
        fm = np.roll(f, 1, axis=ax)
        slope = _van_leer(f - fm, fp - f)
        left = f + 0.5 * slope  # state at face i+1/2 from cell i
        right = np.roll(f - 0.5 * slope, -1, axis=ax)  # from cell i+1
        uf = 0.5 * (u[ax] + np.roll(u[ax], -1, axis=ax))
        flux = np.where(uf > 0, uf * left, uf * right)
        out -= (flux - np.roll(flux, 1, axis=ax)) / h
    return out


def _cfl_number(u, h):
    return float(sum(np.abs(u[:, ax]).max() for ax in range(u.shape[1]))) / h


@dataclass
class PdeConfig:
    """Parameters of one PDE solve."""

    grid: Grid
    riesz: RieszSpec
    a: np.ndarray
    sigma: np.ndarray
    initial: np.ndarray  # (n, m, ..., m)
    T: float
    dt: float = 0.01
    eps: float | None = None
    output_times: np.ndarray | None = None
    n_outputs: int = 12

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        n = self.a.shape[0]
        if self.a.shape != (n, n) or not np.all(np.isfinite(self.a)):
            raise ConfigError("interaction matrix must be a finite square matrix", "interaction")
        if self.sigma.shape != (n,) or np.any(self.sigma <= 0):
            raise ConfigError("need one positive sigma per species", "sigma")
        if self.initial.shape != (n,) + self.grid.shape:
            raise ConfigError("initial data shape does not match grid and species count", "init-shape")
        if self.riesz.d != self.grid.d:
            raise ConfigError("grid and potential dimensions differ", "grid-d")
        if not (self.T > 0 and self.dt > 0):
            raise ConfigError("T and dt must be positive", "pde-time")


def output_schedule(T, n_outputs):
    """Zero, a geometric ladder up to ``T``, and ``T``."""
    if n_outputs < 2:
        return np.array([0.0, T])
    geo = T * np.geomspace(1e-3, 1.0, n_outputs - 1)
    return np.unique(np.concatenate([[0.0], geo, [T]]))


class Solver:
    """Owns kernel transforms and workspace for repeated solves on one grid."""

    def __init__(self, config: PdeConfig):
        self.cfg = config
        g = config.grid
        self.kernel_hat = gradient_kernel_hat(g, config.riesz.s, config.eps)
        ks = g.wavenumbers()
        sym = sum((4.0 / g.h**2) * np.sin(0.5 * k * g.h) ** 2 for k in ks)
        self.lap_symbol = sym
        self.clipped_total = np.zeros(config.a.shape[0])
        self.max_substeps = 1

    def velocity(self, f):
        return velocity_fields(f, self.kernel_hat, self.cfg.a, self.cfg.grid)

    def diffuse(self, f, dt):
        out = np.empty_like(f)
        for al in range(f.shape[0]):
            mult = np.exp(-self.cfg.sigma[al] * dt * self.lap_symbol)
            out[al] = sfft.irfftn(sfft.rfftn(f[al]) * mult, s=self.cfg.grid.shape)
        return out

    def _advect_once(self, f, dt, u0=None):
        h = self.cfg.grid.h
        u = self.velocity(f) if u0 is None else u0
        f1 = np.empty_like(f)
        for al in range(f.shape[0]):
            f1[al] = f[al] + dt * advection_rhs(f[al], u[al], h)
        u1 = self.velocity(f1)
        f2 = np.empty_like(f)
        for al in range(f.shape[0]):
            f2[al] = 0.5 * f[al] + 0.5 * (f1[al] + dt * advection_rhs(f1[al], u1[al], h))
        return f2

    def advect(self, f, dt):
        if not np.any(self.cfg.a):
            return f
        u = self.velocity(f)
        c = _cfl_number(u, self.cfg.grid.h) * dt
        nsub = max(1, math.ceil(c / CFL))
        if nsub > MAX_SUBSTEPS:
            raise InstabilityError(f"advective CFL number {c:.3g} needs more than {MAX_SUBSTEPS} substeps")
        self.max_substeps = max(self.max_substeps, nsub)
        sub = dt / nsub
        for k in range(nsub):
            f = self._advect_once(f, sub, u if k == 0 else None)
        return f

    def step(self, f, dt):
        vol = self.cfg.grid.cell_volume
        n = f.shape[0]
        m0 = f.reshape(n, -1).sum(axis=1) * vol
        f = self.diffuse(f, 0.5 * dt)
        f = self.advect(f, dt)
        f = self.diffuse(f, 0.5 * dt)
        flat = f.reshape(n, -1)
        m1 = flat.sum(axis=1) * vol
        drift = np.abs(m1 - m0) / m0
        if np.any(drift > MASS_DRIFT_TOL):
            raise InvariantViolation(f"mass drift {drift.max():.3e} per step exceeds {MASS_DRIFT_TOL}")
        neg = -np.where(flat < 0, flat, 0.0).sum(axis=1) * vol
        if np.any(neg > CLIP_STEP_TOL):
            raise InvariantViolation(f"negative mass {neg.max():.3e} in one step exceeds {CLIP_STEP_TOL}")
        self.clipped_total += neg
        if np.any(self.clipped_total > CLIP_TOTAL_TOL):
            raise InvariantViolation(f"cumulative clipped mass {self.clipped_total.max():.3e} exceeds {CLIP_TOTAL_TOL}")
        np.maximum(flat, 0.0, out=flat)
        flat *= (m0 / (flat.sum(axis=1) * vol))[:, None]
        return f


def solve(config: PdeConfig, callback=None) -> Timeline:
    """Integrate from ``config.initial`` to ``config.T``; fields at the output times.

    Each interval between outputs is split into equal steps no longer than
    ``config.dt``; the advective CFL condition is enforced by substepping.
    """
    g = config.grid
    f0 = np.array(config.initial, dtype=float)
    if np.any(f0 < 0):
        raise ConfigError("initial data must be nonnegative", "init-sign")
    masses = f0.reshape(f0.shape[0], -1).sum(axis=1) * g.cell_volume
    if np.any(np.abs(masses - 1.0) > 1e-10):
        raise ConfigError(f"initial masses {masses} differ from 1", "init-mass")
    times = output_schedule(config.T, config.n_outputs) if config.output_times is None \
        else np.asarray(config.output_times, dtype=float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0) or times[-1] > config.T * (1 + 1e-12):
        raise ConfigError("output times must start at 0 and increase up to T", "pde-outputs")
    solver = Solver(config)
    f = f0
    fields = [DensityField(f.copy(), 0.0, g)]
    if callback:
        callback(fields[-1])
    bmass = _boundary_mass(f, g)
    for t0, t1 in zip(times[:-1], times[1:]):
        nsteps = max(1, math.ceil((t1 - t0) / config.dt * (1 - 1e-12)))
        dt = (t1 - t0) / nsteps
        for _ in range(nsteps):
            f = solver.step(f, dt)
        fields.append(DensityField(f.copy(), float(t1), g))
        bmass = max(bmass, _boundary_mass(f, g))
        if callback:
            callback(fields[-1])
    if solver.clipped_total.max() > 0:
        log.info("clipped negative mass per species: %s", solver.clipped_total)
    return Timeline(fields, clipped_mass=float(solver.clipped_total.max()),
                    max_substeps=solver.max_substeps, boundary_mass=bmass)


def _boundary_mass(f, g: Grid):
    # mass in the outermost layer of cells on every face
    n = f.shape[0]
    mask = np.zeros(g.shape, dtype=bool)
    for ax in range(g.d):
        idx = [slice(None)] * g.d
        idx[ax] = 0
        mask[tuple(idx)] = True
        idx[ax] = -1
        mask[tuple(idx)] = True
    return float(max(f[al][mask].sum() * g.cell_volume for al in range(n)))


# ----------------------------------------------------------------------------
# Norms and the smallness condition

def lp_norm_timeline(timeline: Timeline, p):
    """``||f_alpha(t)||_{L^p}`` for each output; shape ``(times, n)``."""
    if p < 1:
        raise ValueError("p must be >= 1")
    out = []
    for fld in timeline.fields:
        vol = fld.grid.cell_volume
        flat = fld.values.reshape(fld.n, -1)
        out.append((np.sum(flat**p, axis=1) * vol) ** (1.0 / p))
    return np.array(out)


@dataclass
class LinfReport:
    running_max: np.ndarray  # (times, n)
    initial: np.ndarray
    suspicious: bool


def linf_monitor(timeline: Timeline, growth_flag=2.0):
    """Running maximum of ``||f_alpha(t)||_inf``; flags growth beyond ``growth_flag`` times the start."""
    sup = np.array([fld.values.reshape(fld.n, -1).max(axis=1) for fld in timeline.fields])
    run = np.maximum.accumulate(sup, axis=0)
    init = sup[0]
    return LinfReport(run, init, bool(np.any(run[-1] > growth_flag * init)))


def sobolev_constant(d):
    """Sharp constant in ``||u||_{2d/(d-2)} <= C ||grad u||_2`` (Aubin, Talenti)."""
    return 1.0 / math.sqrt(math.pi * d * (d - 2)) * (math.gamma(d) / math.gamma(d / 2)) ** (1.0 / d)


def hls_constant(d, lam, p, q):
    """Constant in ``|int int f(x) g(y) |x-y|^{-lam}| <= C ||f||_p ||g||_q``.

    Lieb's sharp value on the diagonal ``p = q = 2d/(2d - lam)``; otherwise the
    Lieb-Loss upper bound.
    """
    if abs(1 / p + 1 / q + lam / d - 2) > 1e-12:
        raise ValueError("exponents must satisfy 1/p + 1/q + lam/d = 2")
    if abs(p - q) < 1e-12:
        return math.pi ** (lam / 2) * math.gamma(d / 2 - lam / 2) / math.gamma(d - lam / 2) \
            * (math.gamma(d / 2) / math.gamma(d)) ** (-1 + lam / d)
    area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    t = lam / d
    return d / ((d - lam) * p * q) * (area / d) ** t * ((t / (1 - 1 / p)) ** t + (t / (1 - 1 / q)) ** t)


def gradient_hls_constant(d, s):
    """Constant in ``||grad V * f||_{L^d} <= C ||f||_{L^{d/(d-s)}}`` for ``V = |x|^{-s}``.

    ``|grad V| = s |x|^{-(s+1)}``; by duality the operator bound is the bilinear
    constant with ``p = d/(d-s)``, ``q = d/(d-1)``.
    """
    return s * hls_constant(d, s + 1.0, d / (d - s), d / (d - 1.0))


@dataclass
class SmallnessReport:
    satisfied: bool
    margin: np.ndarray  # rhs - lhs per species
    lhs: np.ndarray
    rhs: np.ndarray
    p: float
    c_hls: float
    c_gns: float


def check_smallness(initial, grid: Grid, a, sigma, s, p=None):
    """Evaluate the smallness condition that keeps ``L^p`` norms nonincreasing.

    For every species ``alpha``:
    ``sum_b |a_ab| ||f_b||_p^{2sp/(d(p-1))} <= 4 sigma_a^2 / (p^2 C_HLS^2 C_GNS^2 sum_b |a_ab|)``.
    """
    d = grid.d
    p = float(d + 1) if p is None else float(p)
    if p < d / (d - s):
        raise ConfigError(f"p={p} must be >= d/(d-s)={d / (d - s):.4g}", "smallness-p")
    a = np.abs(np.atleast_2d(np.asarray(a, dtype=float)))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    initial = np.asarray(initial, dtype=float)
    n = a.shape[0]
    norms = (np.sum(initial.reshape(n, -1) ** p, axis=1) * grid.cell_volume) ** (1 / p)
    c_hls = gradient_hls_constant(d, s)
    c_gns = sobolev_constant(d)
    expo = 2 * s * p / (d * (p - 1))
    lhs = a @ norms**expo
    rowsum = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        rhs = np.where(rowsum > 0, 4 * sigma**2 / (p**2 * c_hls**2 * c_gns**2 * np.where(rowsum > 0, rowsum, 1.0)), np.inf)
    margin = rhs - lhs
    return SmallnessReport(bool(np.all(margin >= 0)), margin, lhs, rhs, p, c_hls, c_gns)
