"""Distances and statistics between particle samples and densities.

Relative entropy and L1/L2 are computed on a common histogram of both
arguments, so Gibbs' inequality and the Csiszar-Kullback-Pinsker bound hold
exactly in the discrete space.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import fft as sfft
from scipy.stats import binomtest

from .errors import ConfigError, InvariantViolation, MsadError

GIBBS_TOL = 1e-12
CKP_TOL = 1e-9
SMOOTH_FLOOR = 1e-12


@dataclass
class Histogram:
    """Bin masses on a tensor grid of bins; ``edges`` holds one edge array per axis."""

    edges: tuple
    masses: np.ndarray
    count: int = 0

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        if np.any(self.masses < 0):
            raise MsadError("histogram masses must be nonnegative")
        tot = self.masses.sum()
        if abs(tot - 1.0) > 1e-12:
            raise MsadError(f"histogram masses sum to {tot!r}, not 1")

    @classmethod
    def from_masses(cls, masses, edges=None, count=0):
        masses = np.asarray(masses, dtype=float)
        if edges is None:
            edges = tuple(np.arange(k + 1, dtype=float) for k in masses.shape)
        return cls(edges, masses / masses.sum(), count)

    def bin_volumes(self):
        widths = [np.diff(e) for e in self.edges]
        vol = widths[0]
        for w in widths[1:]:
            vol = np.multiply.outer(vol, w)
        return vol


@dataclass
class DistanceReport:
    rel_entropy: float
    l1: float
    l2: float
    ckp_margin: float
    smoothed: bool = False


def _as_masses(p):
    return p.masses if isinstance(p, Histogram) else np.asarray(p, dtype=float)


def _entropy_terms(p, q):
    # q * phi(p/q - 1) with phi(x) = (1+x) log1p(x) - x; each term is >= 0
    out = np.zeros(p.shape)
    pos = p > 0
    both = pos & (q > 0)
    pb, qb = p[both], q[both]
    ratio = pb / qb
    delta = ratio - 1.0
    near = np.abs(delta) < 0.5
    # log1p keeps precision near p = q; far from it the direct form avoids 0 * log(0)
    # when p/q underflows relative to 1
    out[both] = np.where(near, qb * ((1.0 + delta) * np.log1p(np.where(near, delta, 0.0)) - delta),
                         pb * np.log(np.where(near, 1.0, ratio)) - (pb - qb))
    only_q = (~pos) & (q > 0)
    out[only_q] = q[only_q]
    return out


def unsupported_bins(p, q):
    """Indices where ``p > 0`` but ``q = 0``."""
    p, q = _as_masses(p), _as_masses(q)
    return [tuple(int(v) for v in ix) for ix in np.argwhere((p > 0) & (q == 0))]


def relative_entropy(p, q):
    """``sum p log(p/q)`` with ``0 log 0 = 0``; ``inf`` when ``p`` is not dominated by ``q``.

    Use :func:`unsupported_bins` to list the offending bins.
    """
    p, q = _as_masses(p), _as_masses(q)
    if p.shape != q.shape:
        raise MsadError("histograms live on different grids")
    if np.any((p > 0) & (q == 0)):
        return math.inf
    return float(_entropy_terms(p, q).sum())


def smoothed_relative_entropy(p, q, floor=SMOOTH_FLOOR):
    """Relative entropy after flooring both arguments at ``floor`` and renormalizing.

    Flooring both sides keeps identical inputs at exactly zero; flooring only
    ``q`` would add about ``floor`` per empty bin.
    """
    p, q = _as_masses(p), _as_masses(q)
    ps = np.maximum(p, floor)
    qs = np.maximum(q, floor)
    return float(_entropy_terms(ps / ps.sum(), qs / qs.sum()).sum())


def l1_distance(p, q):
    return float(np.abs(_as_masses(p) - _as_masses(q)).sum())


def l2_distance(p, q):
    """L2 distance between the piecewise-constant densities of two histograms."""
    if isinstance(p, Histogram):
        vol = p.bin_volumes()
        return float(np.sqrt(np.sum((p.masses - _as_masses(q)) ** 2 / vol)))
    return float(np.sqrt(np.sum((np.asarray(p) - np.asarray(q)) ** 2)))


def ckp_check(p, q, smoothed=False):
    """Distances between ``p`` and ``q`` plus the margin ``sqrt(2H) - L1``.

    A margin below ``-1e-9`` means the entropy or the L1 computation is wrong
    and raises :class:`InvariantViolation`.
    """
    H = smoothed_relative_entropy(p, q) if smoothed else relative_entropy(p, q)
    l1 = l1_distance(p, q)
    if H < -GIBBS_TOL:
        raise InvariantViolation(f"negative relative entropy {H!r}")
    margin = math.sqrt(2.0 * max(H, 0.0)) - l1 if math.isfinite(H) else math.inf
    if margin < -CKP_TOL and not smoothed:
        raise InvariantViolation(f"CKP inequality violated: L1={l1!r} > sqrt(2H)={math.sqrt(2 * H)!r}")
    return DistanceReport(H, l1, l2_distance(p, q), margin, smoothed)


def compare_fields(fa, fb, grid, smoothed=True):
    """Distances between two grid densities of one species, using cell masses."""
    vol = grid.cell_volume
    pa = np.clip(fa, 0, None) * vol
    pb = np.clip(fb, 0, None) * vol
    pa, pb = pa / pa.sum(), pb / pb.sum()
    H = smoothed_relative_entropy(pa, pb) if smoothed else relative_entropy(pa, pb)
    l1 = float(np.abs(fa - fb).sum() * vol)
    l2 = float(np.sqrt(np.sum((fa - fb) ** 2) * vol))
    ckp = math.sqrt(2 * H) - l1_distance(pa, pb) if math.isfinite(H) else math.inf
    return DistanceReport(H, l1, l2, ckp, smoothed)


# ----------------------------------------------------------------------------
# Densities from particles

@nb.njit(cache=True)
def _deposit(pos, L, h, m, bw, cnorm, out):
    P, d = pos.shape
    flat = out.reshape(-1)
    reach = int(math.ceil(bw / h)) + 1
    span = 2 * reach + 1
    nloc = span**d
    w = np.empty(nloc)
    lin = np.empty(nloc, dtype=np.int64)
    base = np.empty(d, dtype=np.int64)
    for p in range(P):
        for c in range(d):
            base[c] = int(math.floor((pos[p, c] + L) / h)) - reach
        tot = 0.0
        for k in range(nloc):
            rem = k
            r2 = 0.0
            li = 0
            for c in range(d):
                off = rem % span
                rem //= span
                j = base[c] + off
                dx = -L + j * h - pos[p, c]
                r2 += dx * dx
                li = li * m + (j % m)
            u2 = r2 / (bw * bw)
            val = cnorm * math.exp(-1.0 / (1.0 - u2)) if u2 < 1.0 else 0.0
            w[k] = val
            lin[k] = li
            tot += val
        if tot > 0.0:
            for k in range(nloc):
                if w[k] > 0.0:
                    flat[lin[k]] += w[k] / tot
    return out


def empirical_density(positions, bandwidth, grid):
    """Particle-wise normalized bump deposition onto the periodic grid.

    Each particle contributes exactly mass ``1/P``; the result is a density
    (values per unit volume).
    """
    if bandwidth < 2 * grid.h:
        raise ConfigError(f"bandwidth {bandwidth:.4g} is below 2h = {2 * grid.h:.4g}", "bandwidth")
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    out = np.zeros(grid.shape)
    _deposit(pos, float(grid.L), float(grid.h), grid.m, float(bandwidth), 1.0, out)
    return out / (pos.shape[0] * grid.cell_volume)


def bins_per_dim(N, d):
    """Histogram resolution ``2 round(N^{1/(d+2)})``."""
    return 2 * int(round(N ** (1.0 / (d + 2))))


def box_edges(L, bins, dims):
    e = np.linspace(-L, L, bins + 1)
    return tuple(e.copy() for _ in range(dims))


def marginal_histogram(samples, K, edges, min_reps=30, pool=True):
    """Histogram of the designated particle tuple over replications.

    ``samples`` has shape ``(reps, n, N, d)``.  ``K`` gives the number of
    designated particles per species.  With ``pool=True`` every disjoint
    K-tuple of a replication is used (all have the same law by exchangeability);
    otherwise only the first ``K[alpha]`` particles of each species.
    Points outside the edges are counted in the outermost bins.
    """
    samples = np.asarray(samples, dtype=float)
    reps, n, N, d = samples.shape
    K = list(K) + [0] * (n - len(K))
    dims = d * sum(K)
    if dims > 3:
        raise ConfigError(f"marginal of dimension {dims} cannot be gridded; reduce K so that d*|K| <= 3", "marginal-dim")
    if dims == 0:
        raise ConfigError("K selects no particles", "marginal-dim")
    if reps < min_reps:
        raise ConfigError(f"{reps} replications; at least {min_reps} are required", "marginal-reps")
    if len(edges) != dims:
        raise ConfigError("edges do not match the marginal dimension", "marginal-dim")
    ntuples = min(N // k for k in K if k > 0) if pool else 1
    cols = []
    for al in range(n):
        if K[al] == 0:
            continue
        blk = samples[:, al, : ntuples * K[al]].reshape(reps, ntuples, K[al] * d)
        cols.append(blk)
    pts = np.concatenate(cols, axis=2).reshape(-1, dims)
    idx = []
    for c, e in enumerate(edges):
        ix = np.searchsorted(e, pts[:, c], side="right") - 1
        idx.append(np.clip(ix, 0, len(e) - 2))
    shape = tuple(len(e) - 1 for e in edges)
    counts = np.bincount(np.ravel_multi_index(idx, shape), minlength=int(np.prod(shape))).reshape(shape)
    return Histogram(edges, counts / counts.sum(), int(counts.sum()))


def _overlap_matrix(edges, grid):
    # fraction of each grid cell [x_k - h/2, x_k + h/2) lying in each bin, periodic
    h, L, m = grid.h, grid.L, grid.m
    lo_c = grid.nodes() - h / 2
    W = np.zeros((len(edges) - 1, m))
    for shift in (-2 * L, 0.0, 2 * L):
        a = lo_c[None, :] + shift
        b = a + h
        lo = np.maximum(a, edges[:-1, None])
        hi = np.minimum(b, edges[1:, None])
        W += np.clip(hi - lo, 0, None) / h
    return W


def bin_field(values, grid, edges):
    """Histogram of a grid density by exact cell/bin overlap integrals."""
    cell = np.asarray(values, dtype=float) * grid.cell_volume
    out = cell
    for ax in range(grid.d):
        W = _overlap_matrix(edges[ax], grid)
        out = np.tensordot(W, out, axes=([1], [ax]))
        out = np.moveaxis(out, 0, ax)
    out = np.clip(out, 0, None)
    return Histogram(tuple(edges), out / out.sum(), 0)


# ----------------------------------------------------------------------------
# Law-of-large-numbers deviation

@nb.njit(parallel=True, cache=True)
def _scalar_pair_sum_K(tgt, src, eps, s, out):
    M, d = tgt.shape
    K = src.shape[0]
    r0 = 4.0 * eps
    for i in nb.prange(M):
        acc = 0.0
        for k in range(K):
            r2 = 0.0
            for c in range(d):
                diff = tgt[i, c] - src[k, c]
                r2 += diff * diff
            r = max(math.sqrt(r2), r0)
            acc += r ** (-(s + 2.0))
        out[i] = acc


def _K_kernel_hat(grid, eps, s):
    x = grid.offsets()
    r = np.sqrt(np.sum(x * x, axis=0))
    Kx = np.maximum(r, 4 * eps) ** (-(s + 2.0))
    Kx[r >= grid.L] = 0.0
    return sfft.rfftn(Kx) * grid.cell_volume


@dataclass
class LlnResult:
    max_deviation: float
    threshold: float
    exceeded: bool


def lln_statistic(positions, field, table, theta, psi="grad"):
    """Largest deviation between the empirical and the mean-field average of ``psi``.

    For every species pair ``(alpha, beta)`` and particle ``i``:
    ``|(1/N) sum_j psi(X_ai - X_bj) - (psi * f_b)(X_ai)|``.  ``psi`` is
    ``"grad"`` (gradient of the mollified potential, unit coupling), ``"K"``
    (the capped power), ``"zero"`` or a float constant.
    """
    from .particles import interpolate_vector_field, pair_sum
    from .pde import convolve_gradient, gradient_kernel_hat

    if not 0 <= theta < 0.5:
        raise ConfigError(f"theta={theta} must lie in [0, 1/2)", "theta-range")
    X = np.asarray(positions, dtype=float)
    n, N, d = X.shape
    grid = field.grid
    thr = N ** (-theta)
    if isinstance(psi, str) and psi == "zero":
        return LlnResult(0.0, thr, False)
    worst = 0.0
    if isinstance(psi, (int, float)):
        # (1/N) sum c - c * mass(f_b)
        for be in range(n):
            worst = max(worst, abs(float(psi) - float(psi) * field.masses()[be]))
        return LlnResult(worst, thr, worst > thr)
    if psi == "grad":
        Kh = gradient_kernel_hat(grid, table.s, table.eps)
    elif psi == "K":
        Kh = _K_kernel_hat(grid, table.eps, table.s)
    else:
        raise ConfigError(f"unknown test function {psi!r}", "lln-psi")
    for be in range(n):
        if psi == "grad":
            conv = convolve_gradient(field.values[be], Kh, grid)
        else:
            conv = sfft.irfftn(Kh * sfft.rfftn(field.values[be]), s=grid.shape)[None]
        for al in range(n):
            if psi == "grad":
                emp = pair_sum(X[al], X[be], table) / N
            else:
                emp = np.empty(N)
                _scalar_pair_sum_K(np.ascontiguousarray(X[al]), np.ascontiguousarray(X[be]),
                                   float(table.eps), float(table.s), emp)
                emp = emp[:, None] / N
            mf, _ = interpolate_vector_field(conv, grid, X[al])
            dev = np.sqrt(np.sum((emp - mf) ** 2, axis=1)).max()
            worst = max(worst, float(dev))
    return LlnResult(worst, thr, worst > thr)


# ----------------------------------------------------------------------------
# Coupling event

def lambda_range(ell, s):
    return (ell, 0.5 - ell * (s + 1))


def wilson_interval(k, n, level=0.95):
    """Wilson score interval for ``k`` successes in ``n`` trials."""
    if n == 0:
        return (0.0, 1.0)
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return (float(ci.low), float(ci.high))


@dataclass
class CouplingStats:
    lam: float
    threshold: float
    times: np.ndarray
    probability: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    reps: int

    @property
    def midpoint(self):
        return 0.5 * (self.ci_low + self.ci_high)


def max_pair_distance(X, Xt):
    """``max_{alpha,i} |X - Xt|``."""
    return float(np.sqrt(np.sum((np.asarray(X) - np.asarray(Xt)) ** 2, axis=-1)).max())


def coupling_event(max_distances, times, N, lam, ell, s):
    """Empirical ``P(max |Xt - X| >= N^{-lam})`` per output time.

    ``max_distances`` has shape ``(reps, times)``.
    """
    lo, hi = lambda_range(ell, s)
    if not lo < lam < hi:
        raise ConfigError(f"lambda={lam} outside the admissible interval ({lo:.4g}, {hi:.4g})", "lambda-range")
    D = np.atleast_2d(np.asarray(max_distances, dtype=float))
    reps = D.shape[0]
    thr = N ** (-lam)
    hits = (D >= thr).sum(axis=0)
    ci = np.array([wilson_interval(k, reps) for k in hits])
    return CouplingStats(lam, thr, np.asarray(times, dtype=float), hits / reps, ci[:, 0], ci[:, 1], reps)


# ----------------------------------------------------------------------------
# Subadditivity on finite spaces

@dataclass
class SubadditivityResult:
    lhs: float
    rhs: float
    holds: bool


def check_exchangeable(joint, counts, tol=1e-12):
    """Raise unless ``joint`` is invariant under permutations within each species.

    Axes of ``joint`` are the particles, species-major; ``counts[alpha]`` is the
    number of particles of species ``alpha``.
    """
    joint = np.asarray(joint)
    start = 0
    for c in counts:
        for a, b in itertools.combinations(range(start, start + c), 2):
            perm = list(range(joint.ndim))
            perm[a], perm[b] = perm[b], perm[a]
            if np.max(np.abs(joint - joint.transpose(perm))) > tol:
                raise MsadError(f"joint law is not exchangeable within a species (particles {a} and {b})")
        start += c


def _product(laws):
    out = np.asarray(laws[0], dtype=float)
    for q in laws[1:]:
        out = np.multiply.outer(out, q)
    return out


def subadditivity_check(joint, N, refs, K, tol=1e-12):
    """Compare ``H(f^(K) | prod f_a^{K_a})`` with ``(max K / N) H(f | prod f_a^N)``.

    ``joint`` is a probability array with ``n * N`` axes (species-major),
    ``refs[alpha]`` the one-particle reference law of species ``alpha`` and
    ``K[alpha] <= N`` the number of kept particles.  The first ``K[alpha]``
    particles of each species are kept.
    """
    joint = np.asarray(joint, dtype=float)
    n = len(refs)
    if joint.ndim != n * N:
        raise MsadError("joint must have n * N axes")
    check_exchangeable(joint, [N] * n)
    ref_full = _product([refs[a] for a in range(n) for _ in range(N)])
    keep = [a * N + i for a in range(n) for i in range(K[a])]
    drop = tuple(ax for ax in range(n * N) if ax not in keep)
    marg = joint.sum(axis=drop) if drop else joint
    ref_k = _product([refs[a] for a in range(n) for _ in range(K[a])]) if keep else np.ones(())
    lhs = relative_entropy(marg.ravel(), ref_k.ravel())
    rhs = max(K) / N * relative_entropy(joint.ravel(), ref_full.ravel())
    return SubadditivityResult(lhs, rhs, bool(lhs <= rhs + tol))
