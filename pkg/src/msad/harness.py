"""Rate experiments, predicted exponents and log-log fits."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, particles, pde
from .errors import ConfigError
from .rng import derive_key

log = logging.getLogger(__name__)


@dataclass
class RatePrediction:
    zeta: float
    ell: float
    s: float
    varrho: float
    admissible: bool
    improved: bool = False


def predicted_zeta(ell, s, varrho=0.0, improved=False):
    """``min(ell, 1/2 - ell (s+2) - varrho)``; ``s+1`` replaces ``s+2`` when ``improved``.

    ``varrho`` may be 0, the limit of an arbitrarily small slack.
    """
    if varrho < 0:
        raise ValueError("varrho must be nonnegative")
    power = s + 1 if improved else s + 2
    zeta = min(ell, 0.5 - ell * power - varrho)
    admissible = 0 < ell < 1.0 / (2 * s + 4)
    return RatePrediction(zeta, ell, s, varrho, admissible, improved)


def crossover_ell(s):
    """The ``ell`` where ``ell = 1/2 - ell (s+2)``."""
    return 1.0 / (2 * (s + 3))


def valid_ranges(ell, s, d, strict=True):
    """Admissible ``ell`` interval and the ``lambda`` interval for a given ``ell``.

    With ``strict`` an empty ``lambda`` interval raises :class:`ConfigError`.
    """
    if not 0 < s <= d - 2:
        raise ConfigError(f"s={s} must lie in (0, d-2]", "riesz-s")
    ell_range = (0.0, 1.0 / (2 * s + 4))
    lam_range = (ell, 0.5 - ell * (s + 1))
    if strict and not lam_range[0] < lam_range[1]:
        raise ConfigError(f"lambda interval ({lam_range[0]:.6g}, {lam_range[1]:.6g}) is empty", "lambda-range")
    return {"ell_range": ell_range, "lambda_range": lam_range}


# ----------------------------------------------------------------------------
# Tables and fits

@dataclass
class FitResult:
    slope: float
    stderr: float
    r2: float
    intercept: float = 0.0


@dataclass
class RateRow:
    experiment: str
    scale: float
    metric: str
    value: float
    stderr: float
    reps: int
    seed: int


@dataclass
class RateTable:
    experiment: str
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def add(self, scale, metric, value, stderr=0.0, reps=1, seed=0):
        self.rows.append(RateRow(self.experiment, float(scale), metric, float(value), float(stderr), int(reps), int(seed)))

    def series(self, metric):
        rows = [r for r in self.rows if r.metric == metric]
        return (np.array([r.scale for r in rows]), np.array([r.value for r in rows]),
                np.array([r.stderr for r in rows]))

    def fit(self, metric):
        x, y, e = self.series(metric)
        res = fit_loglog_slope(x, y, e, labels=[f"{metric}@{v:g}" for v in x])
        self.fits[metric] = res
        return res

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "scale", "metric", "value", "stderr", "reps", "seed"])
        for r in self.rows:
            w.writerow([r.experiment, repr(r.scale), r.metric, repr(r.value), repr(r.stderr), r.reps, r.seed])
        return buf.getvalue()


def fit_loglog_slope(scales, values, stderrs=None, labels=None):
    """Weighted least squares of ``log value`` on ``log scale``.

    Weights are ``(value / stderr)^2`` (inverse variance of ``log value``);
    the fit is unweighted if any stderr is missing or zero.
    """
    x = np.asarray(scales, dtype=float)
    y = np.asarray(values, dtype=float)
    if x.size < 3:
        raise ConfigError(f"need at least 3 rows for a slope fit, got {x.size}", "fit-rows")
    bad = np.flatnonzero(~(y > 0))
    if bad.size:
        names = [labels[i] if labels else f"row {i}" for i in bad]
        raise ConfigError(f"nonpositive values cannot be fitted on log axes: {', '.join(names)}", "fit-values")
    if np.any(np.diff(x) == 0) or not (np.all(np.diff(x) > 0) or np.all(np.diff(x) < 0)):
        raise ConfigError("scale column must be strictly monotone", "fit-scales")
    lx, ly = np.log(x), np.log(y)
    if stderrs is None or np.any(~(np.asarray(stderrs, dtype=float) > 0)):
        w = np.ones_like(lx)
    else:
        w = (y / np.asarray(stderrs, dtype=float)) ** 2
    W = w / w.sum()
    xm, ym = np.sum(W * lx), np.sum(W * ly)
    sxx = np.sum(W * (lx - xm) ** 2)
    slope = np.sum(W * (lx - xm) * (ly - ym)) / sxx
    intercept = ym - slope * xm
    resid = ly - (intercept + slope * lx)
    dof = x.size - 2
    sigma2 = np.sum(w * resid**2) / dof / np.sum(w) if dof > 0 else 0.0
    stderr = math.sqrt(sigma2 / sxx) if sxx > 0 else math.inf
    sst = np.sum(W * (ly - ym) ** 2)
    r2 = 1.0 - np.sum(W * resid**2) / sst if sst > 0 else 1.0
    return FitResult(float(slope), float(stderr), float(r2), float(intercept))


def monotone_nonincreasing(values, rtol=0.0):
    v = np.asarray(values, dtype=float)
    return bool(np.all(v[1:] <= v[:-1] * (1 + rtol) + 1e-300))


# ----------------------------------------------------------------------------
# Experiments

def run_pde_error_experiment(run, eps_list=None, table=None):
    """``sup_t (||f_eps - f||_2^2 + H_smoothed(f_eps | f))`` against ``eps``.

    The limiting system is solved once and the intermediate system once per
    ``eps``; both share the output schedule.  Sums run over species.
    """
    eps_list = sorted((run.experiment.eps_list if eps_list is None else eps_list), reverse=True)
    if len(eps_list) < 3:
        raise ConfigError("need at least 3 eps values", "fit-rows")
    grid = run.grid_obj()
    f0 = run.initial_fields(grid)
    small = pde.check_smallness(f0, grid, run.a_matrix(), run.sigma_vec(), run.model.s)
    if not small.satisfied:
        raise ConfigError(f"smallness condition fails (margins {small.margin})", "smallness")
    table = table or RateTable("pde-error")
    limit = pde.solve(run.pde_config(eps=None))
    table.notes["smallness_margin"] = small.margin.tolist()
    for eps in eps_list:
        tl = pde.solve(run.pde_config(eps=eps))
        l2sq, ent, comb = [], [], []
        for fe, fl in zip(tl.fields, limit.fields):
            a2 = 0.0
            hh = 0.0
            for al in range(fe.n):
                rep = metrics.compare_fields(fe.values[al], fl.values[al], grid, smoothed=True)
                a2 += rep.l2**2
                hh += rep.rel_entropy
            l2sq.append(a2)
            ent.append(hh)
            comb.append(a2 + hh)
        table.add(eps, "l2sq", max(l2sq))
        table.add(eps, "rel_entropy_smoothed", max(ent))
        table.add(eps, "pde_error", max(comb))
    table.fit("pde_error")
    return table


def _pde_at_steps(run, sim):
    times = np.arange(sim.n_steps + 1) * sim.dt
    times[-1] = sim.T
    return pde.solve(run.pde_config(eps=sim.eps, output_times=times))


def run_coupling_experiment(run, N_list=None, lam=None, reps=None, seed=None, table=None):
    """Final-time probability that the particle and mean-field paths separate by ``N^{-lam}``."""
    N_list = list(run.experiment.N_list if N_list is None else N_list)
    lam = run.experiment.lam if lam is None else lam
    reps = run.experiment.reps if reps is None else reps
    seed = run.particles.seed if seed is None else seed
    if reps < 50:
        raise ConfigError(f"coupling experiment needs >= 50 replications, got {reps}", "reps")
    valid_ranges(run.particles.ell, run.model.s, run.model.d)
    table = table or RateTable("coupling")
    for N in N_list:
        sim = run.sim_config(N, seed)
        tab = run.table(sim.eps)
        timeline = _pde_at_steps(run, sim)
        Kh = pde.gradient_kernel_hat(timeline.fields[0].grid, run.model.s, sim.eps)
        vel = particles.mean_field_velocities(sim, timeline, Kh)
        out_steps = sim.output_steps()
        dists = np.zeros((reps, out_steps.size))
        escape = 0.0
        for r in range(reps):
            rsim = run.sim_config(N, derive_key(seed, N, r))
            rlog = particles.RunLog()
            X, Xt = particles.simulate_coupled(rsim, tab, timeline, Kh, rlog, velocities=vel)
            dists[r] = [metrics.max_pair_distance(a.positions, b.positions) for a, b in zip(X, Xt)]
            escape = max(escape, rlog.max_escape_fraction)
        times = out_steps * sim.dt
        stats = metrics.coupling_event(dists, times, N, lam, run.particles.ell, run.model.s)
        p = stats.probability[-1]
        table.add(N, "p_coupling", p, math.sqrt(p * (1 - p) / reps), reps, seed)
        table.add(N, "p_coupling_ci_low", stats.ci_low[-1], 0.0, reps, seed)
        table.add(N, "p_coupling_ci_high", stats.ci_high[-1], 0.0, reps, seed)
        md = dists[:, -1]
        table.add(N, "mean_max_dist", md.mean(), md.std(ddof=1) / math.sqrt(reps), reps, seed)
        table.add(N, "threshold", stats.threshold, 0.0, reps, seed)
        table.notes.setdefault("escape_fraction", {})[N] = escape
    try:
        table.fit("mean_max_dist")
    except ConfigError as exc:
        log.warning("no slope fit: %s", exc)
    return table


def _bootstrap_l1(counts_per_rep, ref, nboot, key):
    rng = np.random.default_rng(np.random.SeedSequence([key, 7]))
    reps = counts_per_rep.shape[0]
    vals = np.empty(nboot)
    for b in range(nboot):
        pick = rng.integers(0, reps, reps)
        c = counts_per_rep[pick].sum(axis=0)
        vals[b] = np.abs(c / c.sum() - ref).sum()
    return vals.std(ddof=1)


def run_marginal_rate_experiment(run, N_list=None, reps=None, seed=None, species=None, table=None, nboot=50):
    """L1 distance between the one-particle histogram and the binned limiting density."""
    N_list = list(run.experiment.N_list if N_list is None else N_list)
    reps = run.experiment.reps if reps is None else reps
    seed = run.particles.seed if seed is None else seed
    species = run.experiment.species if species is None else species
    d = run.model.d
    if d > 3:
        raise ConfigError("one-particle marginal needs d <= 3 for gridding", "marginal-dim")
    if reps < 100:
        raise ConfigError(f"marginal experiment needs >= 100 replications, got {reps}", "reps")
    table = table or RateTable("marginal")
    grid = run.grid_obj()
    limit = pde.solve(run.pde_config(eps=None, output_times=[0.0, run.model.T]))
    fT = limit.fields[-1].values[species]
    K = [0] * run.n
    K[species] = 1
    for N in N_list:
        sim = run.sim_config(N, seed)
        tab = run.table(sim.eps)
        edges = metrics.box_edges(run.grid.L, metrics.bins_per_dim(N, d), d)
        ref = metrics.bin_field(fT, grid, edges)
        finals = np.empty((reps, run.n, N, d))
        for r in range(reps):
            rsim = run.sim_config(N, derive_key(seed, N, r))
            finals[r] = particles.simulate(rsim, tab)[-1].positions
        hist = metrics.marginal_histogram(finals, K, edges)
        rep = metrics.ckp_check(hist, ref, smoothed=True)
        per_rep = np.stack([metrics.marginal_histogram(finals[r:r + 1], K, edges, min_reps=1).masses * N
                            for r in range(reps)]).reshape(reps, -1)
        err = _bootstrap_l1(per_rep, ref.masses.ravel(), nboot, derive_key(seed, N))
        table.add(N, "l1_marginal", rep.l1, err, reps, seed)
        table.add(N, "rel_entropy_smoothed", rep.rel_entropy, 0.0, reps, seed)
        table.add(N, "bins_per_dim", metrics.bins_per_dim(N, d), 0.0, reps, seed)
    table.fit("l1_marginal")
    pred = predicted_zeta(run.particles.ell, run.model.s, 0.0, run.experiment.improved_rate)
    table.notes["predicted_zeta"] = pred.zeta
    return table


def run_lln_experiment(run, N_list=None, theta=None, reps=None, seed=None, psi=None, table=None, m_values=(2, 4, 8)):
    """Exceedance frequency of the LLN deviation statistic on mean-field particles."""
    from .kernels import auxiliary_K

    N_list = list(run.experiment.N_list if N_list is None else N_list)
    theta = run.experiment.theta if theta is None else theta
    reps = run.experiment.reps if reps is None else reps
    seed = run.particles.seed if seed is None else seed
    psi = run.experiment.psi if psi is None else psi
    if not 0 <= theta < 0.5:
        raise ConfigError(f"theta={theta} must lie in [0, 1/2)", "theta-range")
    table = table or RateTable("lln")
    for N in N_list:
        sim = run.sim_config(N, seed)
        tab = run.table(sim.eps)
        timeline = _pde_at_steps(run, sim)
        Kh = pde.gradient_kernel_hat(timeline.fields[0].grid, run.model.s, sim.eps)
        vel = particles.mean_field_velocities(sim, timeline, Kh)
        fT = timeline.fields[-1]
        hits = 0
        devs = np.empty(reps)
        for r in range(reps):
            rsim = run.sim_config(N, derive_key(seed, N, r))
            Xt = particles.simulate_mean_field(rsim, timeline, Kh, velocities=vel)
            res = metrics.lln_statistic(Xt.positions, fT, tab, theta, psi)
            devs[r] = res.max_deviation
            hits += res.exceeded
        p = hits / reps
        table.add(N, "p_exceed", p, math.sqrt(p * (1 - p) / reps), reps, seed)
        table.add(N, "mean_max_dev", devs.mean(), devs.std(ddof=1) / math.sqrt(reps) if reps > 1 else 0.0, reps, seed)
        table.add(N, "threshold", N ** (-theta), 0.0, reps, seed)
        for m in m_values:
            table.add(N, f"bound_shape_m{m}", float(N) ** (m * (2 * theta - 1) + 1), 0.0, reps, seed)
        if psi == "K":
            table.add(N, "psi_sup", float(auxiliary_K(0.0, sim.eps, run.model.s)), 0.0, reps, seed)
    try:
        table.fit("mean_max_dev")
    except ConfigError as exc:
        log.warning("no slope fit: %s", exc)
    return table


EXPERIMENTS = {
    "pde-error": run_pde_error_experiment,
    "coupling": run_coupling_experiment,
    "marginal": run_marginal_rate_experiment,
    "lln": run_lln_experiment,
}
