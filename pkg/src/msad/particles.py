"""Multi-species moderately interacting particles and their mean-field copies.

Particle ``i`` of species ``alpha`` moves by

    dX = -(1/N) sum_beta sum_j a[alpha, beta] grad(V * chi_eps)(X - X_beta_j) dt + sqrt(2 sigma_alpha) dB

discretized by Euler-Maruyama.  The mean-field copies ``Xt`` share the initial
positions and Brownian increments but feel the drift of a precomputed density
field instead of the other particles.

Force sums are direct (no cutoff).  Each target particle accumulates its
sources in ascending order inside a single task, so results do not depend on
the number of threads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import rng
from .errors import ConfigError, InstabilityError, MsadError
from .kernels import KernelTable, MollifierSpec, RieszSpec, q_lookup

log = logging.getLogger(__name__)

TARGET_CHUNK = 512
DT_CAP_FACTOR = 0.1
ESCAPE_FACTOR = 1e3
_FM = {"nnan", "ninf", "nsz", "contract"}


# ----------------------------------------------------------------------------
# Compiled pair sums

@nb.njit(parallel=True, fastmath=_FM, cache=True)
def _pair_sum3(tgt, src, radii, qv, qs, prm, rc2, s, out, chunk):
    M = tgt.shape[0]
    K = src.shape[0]
    sx = src[:, 0].copy()
    sy = src[:, 1].copy()
    sz = src[:, 2].copy()
    nchunks = (M + chunk - 1) // chunk
    coulomb = s == 1.0
    ex = -(s + 2.0) / 2.0
    for c in nb.prange(nchunks):
        lo = c * chunk
        hi = min(M, lo + chunk)
        n = hi - lo
        tx = tgt[lo:hi, 0].copy()
        ty = tgt[lo:hi, 1].copy()
        tz = tgt[lo:hi, 2].copy()
        ax = np.zeros(n)
        ay = np.zeros(n)
        az = np.zeros(n)
        for k in range(K):
            xk = sx[k]
            yk = sy[k]
            zk = sz[k]
            nnear = 0
            if coulomb:
                for t in range(n):
                    dx = tx[t] - xk
                    dy = ty[t] - yk
                    dz = tz[t] - zk
                    r2 = dx * dx + dy * dy + dz * dz
                    far = r2 >= rc2
                    r2s = r2 if far else rc2
                    q = -1.0 / (r2s * np.sqrt(r2s))
                    q = q if far else 0.0
                    nnear += 0 if far else 1
                    ax[t] += q * dx
                    ay[t] += q * dy
                    az[t] += q * dz
            else:
                for t in range(n):
                    dx = tx[t] - xk
                    dy = ty[t] - yk
                    dz = tz[t] - zk
                    r2 = dx * dx + dy * dy + dz * dz
                    far = r2 >= rc2
                    r2s = r2 if far else rc2
                    q = -s * np.exp(ex * np.log(r2s))
                    q = q if far else 0.0
                    nnear += 0 if far else 1
                    ax[t] += q * dx
                    ay[t] += q * dy
                    az[t] += q * dz
            if nnear > 0:
                # near pairs contributed exactly 0 above; adding them now keeps the per-target order
                for t in range(n):
                    dx = tx[t] - xk
                    dy = ty[t] - yk
                    dz = tz[t] - zk
                    r2 = dx * dx + dy * dy + dz * dz
                    if r2 < rc2:
                        q = q_lookup(np.sqrt(r2), radii, qv, qs, prm)
                        ax[t] += q * dx
                        ay[t] += q * dy
                        az[t] += q * dz
        for t in range(n):
            out[lo + t, 0] = ax[t]
            out[lo + t, 1] = ay[t]
            out[lo + t, 2] = az[t]


@nb.njit(parallel=True, cache=True)
def _pair_sum_nd(tgt, src, radii, qv, qs, prm, out):
    M, d = tgt.shape
    K = src.shape[0]
    for i in nb.prange(M):
        acc = np.zeros(d)
        for k in range(K):
            r2 = 0.0
            for c in range(d):
                diff = tgt[i, c] - src[k, c]
                r2 += diff * diff
            q = q_lookup(np.sqrt(r2), radii, qv, qs, prm)
            for c in range(d):
                acc[c] += q * (tgt[i, c] - src[k, c])
        for c in range(d):
            out[i, c] = acc[c]


def pair_sum(targets, sources, table: KernelTable):
    """``sum_j grad(V * chi_eps)(x_i - y_j)`` for every target ``x_i``; shape ``(M, d)``."""
    tgt = np.ascontiguousarray(targets, dtype=np.float64)
    src = np.ascontiguousarray(sources, dtype=np.float64)
    out = np.empty_like(tgt)
    if tgt.shape[1] == 3:
        _pair_sum3(tgt, src, table.radii, table.q_eps, table.q_slope, table.params,
                   table.r_exact**2, float(table.s), out, TARGET_CHUNK)
    else:
        _pair_sum_nd(tgt, src, table.radii, table.q_eps, table.q_slope, table.params, out)
    return out


# ----------------------------------------------------------------------------
# Configuration and state

@dataclass(frozen=True)
class SpeciesConfig:
    """Diffusion coefficient and truncated-Gaussian initial law of one species."""

    sigma: float
    center: tuple = (0.0, 0.0, 0.0)
    width: float = 2.0
    cutoff: float | None = 5.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma={self.sigma} must be positive", "sigma")
        if self.width < 0:
            raise ConfigError("width must be nonnegative", "init-width")


def dt_cap(eps, s):
    """Largest admissible Euler-Maruyama step, ``0.1 eps^{s+2}``."""
    return DT_CAP_FACTOR * eps ** (s + 2)


@dataclass
class SimConfig:
    """Everything needed to run the particle system."""

    N: int
    riesz: RieszSpec
    moll: MollifierSpec
    a: np.ndarray
    species: list
    T: float
    dt: float | None = None
    seed: int = 0
    box_L: float = 12.0
    n_outputs: int = 2

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        n = self.a.shape[0]
        if self.a.shape != (n, n) or not np.all(np.isfinite(self.a)):
            raise ConfigError("interaction matrix must be a finite square matrix", "interaction")
        if len(self.species) != n:
            raise ConfigError(f"{len(self.species)} species configs for an {n}x{n} interaction matrix", "species")
        if self.N < 1:
            raise ConfigError("N must be positive", "N")
        if not self.T > 0:
            raise ConfigError("T must be positive", "T")
        cap = dt_cap(self.eps, self.riesz.s)
        if self.dt is None:
            self.dt = self.T / math.ceil(self.T / cap * (1 - 1e-12))
        elif not self.dt > 0:
            raise ConfigError("dt must be positive", "dt-cap")
        elif self.dt > cap * (1 + 1e-12):
            raise ConfigError(f"dt={self.dt:.6g} exceeds the stability cap 0.1*eps^(s+2)={cap:.6g}", "dt-cap")
        if self.T < self.dt * (1 - 1e-12):
            raise ConfigError("T must be at least dt", "T")
        # land exactly on T
        self.dt = self.T / math.ceil(self.T / self.dt * (1 - 1e-12))

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def d(self):
        return self.riesz.d

    @property
    def eps(self):
        return self.moll.epsilon

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def key(self):
        return int(self.seed) & (2**64 - 1)

    def output_steps(self):
        k = max(2, self.n_outputs)
        return np.unique(np.round(np.linspace(0, self.n_steps, k)).astype(int))


@dataclass
class ParticleState:
    """Positions ``(n, N, d)`` at time ``t`` after ``step_index`` steps."""

    t: float
    positions: np.ndarray
    step_index: int


@dataclass
class RunLog:
    max_escape_fraction: float = 0.0
    wrap_count: int = 0
    notes: list = field(default_factory=list)


@nb.njit(cache=True)
def _sample_species(out, key, species, center, width, cutoff):
    N, d = out.shape
    z = np.empty(d)
    nblocks = (d + 1) // 2
    for p in range(N):
        attempt = 0
        while True:
            rng.normal_row(z, key, species, p, 0, rng.INITIAL, attempt * nblocks)
            attempt += 1
            if cutoff <= 0.0 or np.sum(z * z) <= cutoff * cutoff:
                break
        for c in range(d):
            out[p, c] = center[c] + width * z[c]


def sample_initial(config: SimConfig) -> ParticleState:
    """i.i.d. draws from each species' truncated Gaussian; a pure function of the seed."""
    pos = np.empty((config.n, config.N, config.d))
    for al, sp in enumerate(config.species):
        center = np.zeros(config.d) + np.asarray(sp.center, dtype=float)[: config.d]
        cutoff = -1.0 if sp.cutoff is None else float(sp.cutoff)
        _sample_species(pos[al], np.uint64(config.key), al, center, float(sp.width), cutoff)
    return ParticleState(0.0, pos, 0)


def _raise_nonfinite(positions, drift):
    n, N, _ = positions.shape
    bad = np.argwhere(~np.isfinite(drift).all(axis=2))
    al, i = (int(bad[0][0]), int(bad[0][1]))
    x = positions[al, i]
    flat = positions.reshape(-1, positions.shape[2])
    dist = np.linalg.norm(flat - x, axis=1)
    dist[al * N + i] = np.inf
    j = int(np.argmin(dist))
    raise MsadError(f"non-finite drift on particle (species {al}, index {i}); "
                    f"nearest partner (species {j // N}, index {j % N}) at distance {dist[j]:.3e}")


def compute_drift(positions, table: KernelTable, a):
    """Interaction drift for every particle; shape ``(n, N, d)``."""
    n, N, d = positions.shape
    a = np.atleast_2d(a)
    drift = np.zeros_like(positions)
    for al in range(n):
        for be in range(n):
            if a[al, be] != 0.0:
                drift[al] -= a[al, be] * pair_sum(positions[al], positions[be], table)
    drift /= N
    if not np.all(np.isfinite(drift)):
        _raise_nonfinite(positions, drift)
    return drift


def brownian_increments(config: SimConfig, step_index, out=None):
    """``sqrt(2 sigma dt) Z`` for every particle at one step; shape ``(n, N, d)``."""
    if out is None:
        out = np.empty((config.n, config.N, config.d))
    for al, sp in enumerate(config.species):
        rng.fill_normals(out[al], np.uint64(config.key), al, 0, step_index, rng.BROWNIAN)
        out[al] *= math.sqrt(2.0 * sp.sigma * config.dt)
    return out


def _check_escape(positions, config: SimConfig, runlog: RunLog):
    amax = np.abs(positions).max()
    if not np.isfinite(amax) or amax > ESCAPE_FACTOR * config.box_L:
        raise InstabilityError(f"particle coordinate {amax:.3e} exceeds {ESCAPE_FACTOR:g} x box half-width")
    outside = np.any(np.abs(positions) >= config.box_L, axis=2).mean()
    runlog.max_escape_fraction = max(runlog.max_escape_fraction, float(outside))


def step(state: ParticleState, config: SimConfig, table: KernelTable) -> ParticleState:
    """One Euler-Maruyama step."""
    drift = compute_drift(state.positions, table, config.a)
    noise = brownian_increments(config, state.step_index)
    pos = state.positions + drift * config.dt + noise
    k = state.step_index + 1
    return ParticleState(k * config.dt, pos, k)


def simulate(config: SimConfig, table: KernelTable, runlog: RunLog | None = None):
    """Snapshots at ``config.output_steps()``; the first is the initial state."""
    runlog = RunLog() if runlog is None else runlog
    outs = set(config.output_steps().tolist())
    state = sample_initial(config)
    snaps = [state]
    for _ in range(config.n_steps):
        state = step(state, config, table)
        _check_escape(state.positions, config, runlog)
        if state.step_index in outs:
            snaps.append(state)
    return snaps


# ----------------------------------------------------------------------------
# Mean-field copies

@nb.njit(cache=True)
def _interp_multilinear(u, L, h, x, out):
    """Periodic multilinear interpolation of ``u`` (comp, m, ..., m) at points ``x`` (P, d)."""
    P, d = x.shape
    ncomp = u.shape[0]
    m = u.shape[1]
    flat = u.reshape(ncomp, -1)
    wraps = 0
    idx0 = np.empty(d, dtype=np.int64)
    frac = np.empty(d)
    for p in range(P):
        for c in range(d):
            g = (x[p, c] + L) / h
            if g < 0.0 or g >= m:
                wraps += 1
            fl = math.floor(g)
            frac[c] = g - fl
            idx0[c] = int(fl) % m
        for k in range(ncomp):
            out[p, k] = 0.0
        for corner in range(1 << d):
            w = 1.0
            lin = 0
            for c in range(d):
                bit = (corner >> c) & 1
                w *= frac[c] if bit else 1.0 - frac[c]
                lin = lin * m + (idx0[c] + bit) % m
            if w != 0.0:
                for k in range(ncomp):
                    out[p, k] += w * flat[k, lin]
    return wraps


def interpolate_vector_field(u, grid, x):
    """Values of a grid vector field ``u`` (d, m, ..., m) at points ``x`` (P, d).

    Returns ``(values, wraps)`` where ``wraps`` counts coordinates that fell
    outside the box and were mapped back periodically.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty((x.shape[0], u.shape[0]))
    wraps = _interp_multilinear(np.ascontiguousarray(u), float(grid.L), float(grid.h), x, out)
    return out, int(wraps)


def drift_from_field(x, field, kernel_hat, a, species):
    """Mean-field drift ``-sum_b a[species, b] grad W * f_b`` at points ``x``.

    ``kernel_hat`` comes from :func:`msad.pde.gradient_kernel_hat`.
    """
    from .pde import velocity_fields

    u = velocity_fields(field.values, kernel_hat, np.atleast_2d(a), field.grid)[species]
    vals, wraps = interpolate_vector_field(u, field.grid, np.atleast_2d(x))
    if wraps:
        log.warning("%d coordinates outside the box were wrapped periodically", wraps)
    return vals


def _check_timeline(config: SimConfig, timeline):
    times = timeline.times
    want = np.arange(config.n_steps + 1) * config.dt
    if len(times) < len(want):
        raise MsadError(f"field timeline has {len(times)} entries, needs one per step ({len(want)})")
    for k, t in enumerate(want):
        if abs(times[k] - t) > 1e-9 * max(1.0, config.T):
            raise MsadError(f"field timeline gap: entry {k} at t={times[k]:.9g}, expected t={t:.9g}")


def mean_field_velocities(config: SimConfig, timeline, kernel_hat):
    """Grid velocity fields ``(n, d, m, ..., m)`` at every step time, for reuse across replications."""
    from .pde import velocity_fields

    _check_timeline(config, timeline)
    grid = timeline.fields[0].grid
    return [velocity_fields(timeline.fields[k].values, kernel_hat, config.a, grid) for k in range(config.n_steps)]


def _velocity_source(config, timeline, kernel_hat, velocities):
    from .pde import velocity_fields

    if velocities is not None:
        if len(velocities) < config.n_steps:
            raise MsadError(f"{len(velocities)} velocity fields for {config.n_steps} steps")
        return lambda k: velocities[k]
    _check_timeline(config, timeline)
    grid = timeline.fields[0].grid
    return lambda k: velocity_fields(timeline.fields[k].values, kernel_hat, config.a, grid)


def simulate_coupled(config: SimConfig, table: KernelTable, timeline, kernel_hat, runlog: RunLog | None = None,
                     observer=None, velocities=None):
    """Run the particle system and its mean-field copies with shared randomness.

    ``timeline`` must hold the intermediate density at every step time ``k dt``
    (or pass ``velocities`` from :func:`mean_field_velocities`).  Returns
    ``(snaps_X, snaps_Xt)`` at ``config.output_steps()``.  If ``observer`` is
    given it is called as ``observer(k, X, Xt)`` after every step.
    """
    runlog = RunLog() if runlog is None else runlog
    vel = _velocity_source(config, timeline, kernel_hat, velocities)
    grid = timeline.fields[0].grid
    outs = set(config.output_steps().tolist())
    X = sample_initial(config)
    Xt = ParticleState(0.0, X.positions.copy(), 0)
    snaps, snaps_t = [X], [Xt]
    if observer:
        observer(0, X.positions, Xt.positions)
    noise = np.empty_like(X.positions)
    for k in range(config.n_steps):
        u = vel(k)
        dt_drift = np.empty_like(Xt.positions)
        for al in range(config.n):
            dt_drift[al], w = interpolate_vector_field(u[al], grid, Xt.positions[al])
            runlog.wrap_count += w
        drift = compute_drift(X.positions, table, config.a)
        brownian_increments(config, k, noise)
        X = ParticleState((k + 1) * config.dt, X.positions + drift * config.dt + noise, k + 1)
        Xt = ParticleState((k + 1) * config.dt, Xt.positions + dt_drift * config.dt + noise, k + 1)
        _check_escape(X.positions, config, runlog)
        if observer:
            observer(k + 1, X.positions, Xt.positions)
        if k + 1 in outs:
            snaps.append(X)
            snaps_t.append(Xt)
    if runlog.wrap_count:
        log.warning("%d mean-field particle coordinates were wrapped into the box", runlog.wrap_count)
    return snaps, snaps_t


def simulate_mean_field(config: SimConfig, timeline, kernel_hat, runlog: RunLog | None = None, velocities=None):
    """Only the mean-field copies (no particle interaction); final state."""
    runlog = RunLog() if runlog is None else runlog
    vel = _velocity_source(config, timeline, kernel_hat, velocities)
    grid = timeline.fields[0].grid
    Xt = sample_initial(config)
    noise = np.empty_like(Xt.positions)
    for k in range(config.n_steps):
        u = vel(k)
        drift = np.empty_like(Xt.positions)
        for al in range(config.n):
            drift[al], w = interpolate_vector_field(u[al], grid, Xt.positions[al])
            runlog.wrap_count += w
        brownian_increments(config, k, noise)
        Xt = ParticleState((k + 1) * config.dt, Xt.positions + drift * config.dt + noise, k + 1)
    return Xt
