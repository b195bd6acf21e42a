"""Riesz potential, bump mollifier and radial tables of the mollified kernel.

The mollified potential ``V * chi_eps`` is radial, so it is stored as a
one-dimensional profile ``v(r)`` together with ``g(r) = v'(r)`` and
``q(r) = g(r) / r``.  The gradient at a displacement ``x`` is ``q(|x|) x``,
which is smooth through the origin and odd by construction.

Profiles are obtained by integrating the spherical mean of ``|x - y|^{-s}``
over the mollifier's radial density.  The spherical mean over ``|y| = rho`` is
a Gauss hypergeometric function of ``(rho / r)^2``; for the Coulomb exponent it
reduces to ``max(r, rho)^{-s}`` (Newton's theorem).
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from scipy import integrate, special
from scipy.interpolate import PchipInterpolator

from .errors import ConfigError, QuadratureError

QUAD_EPSREL = 1e-12
QUAD_EPSABS = 0.0
TABLE_VERSION = 1


def sphere_area(d):
    """Surface area of the unit sphere in R^d."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


@dataclass(frozen=True)
class RieszSpec:
    """Exponent and dimension of ``V(x) = |x|^{-s}``."""

    s: float
    d: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 3:
            raise ConfigError(f"dimension d={self.d} must be an integer >= 3", "riesz-d")
        if not (0.0 < self.s <= self.d - 2):
            raise ConfigError(f"s={self.s} must lie in (0, d-2] = (0, {self.d - 2}]", "riesz-s")

    @property
    def coulomb(self):
        return self.s == self.d - 2


def _bump_normalizer(d):
    # 1 / (|S^{d-1}| int_0^1 u^{d-1} exp(-1/(1-u^2)) du)
    val, err = integrate.quad(lambda u: u ** (d - 1) * math.exp(-1.0 / (1.0 - u * u)), 0.0, 1.0,
                              epsabs=0.0, epsrel=1e-13, limit=200)
    return 1.0 / (sphere_area(d) * val)


_NORMALIZERS: dict[int, float] = {}


def bump_constant(d):
    """Normalizing constant of the unit bump in dimension ``d``."""
    if d not in _NORMALIZERS:
        _NORMALIZERS[d] = _bump_normalizer(d)
    return _NORMALIZERS[d]


def bump_profile(u, d):
    """Radial profile of the unit-ball bump, zero for ``u >= 1``."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = u < 1.0
    ui = u[inside]
    out[inside] = bump_constant(d) * np.exp(-1.0 / (1.0 - ui * ui))
    return out


@dataclass(frozen=True)
class MollifierSpec:
    """Bump mollifier at scale ``epsilon = N^{-ell}``.

    Use :meth:`from_epsilon` when only the scale matters (kernel tests, PDE
    runs that are not tied to a particle count).
    """

    ell: float
    N: int
    d: int = 3
    _eps: float | None = field(default=None, repr=False)

    def __post_init__(self):
        if self._eps is None:
            if self.N < 1:
                raise ConfigError(f"N={self.N} must be positive", "moll-N")
            if not self.ell > 0:
                raise ConfigError(f"ell={self.ell} must be positive", "ell-range")
        elif not self._eps > 0:
            raise ConfigError(f"epsilon={self._eps} must be positive", "moll-eps")

    @classmethod
    def from_epsilon(cls, eps, d=3):
        return cls(ell=float("nan"), N=0, d=d, _eps=float(eps))

    @property
    def epsilon(self):
        if self._eps is not None:
            return self._eps
        return float(self.N) ** (-self.ell)


def riesz_potential(x, spec: RieszSpec):
    """``|x|^{-s}`` for a point (or a stack of points along the last axis)."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0):
        raise ValueError("Riesz potential is singular at x = 0")
    return r ** (-spec.s)


def mollifier(x, spec: MollifierSpec):
    """``chi_eps(x) = eps^{-d} chi(x / eps)``; vectorized over the last axis."""
    x = np.asarray(x, dtype=float)
    eps = spec.epsilon
    r = np.linalg.norm(x, axis=-1)
    return bump_profile(r / eps, spec.d) * eps ** (-spec.d)


def mollifier_fourier(kappa, d, nodes=256):
    """Fourier transform of the unit bump at wavenumbers ``kappa = |k|``.

    Uses the Hankel form ``(2 pi)^{d/2} k^{1-d/2} int u^{d/2} J_{d/2-1}(k u) chi(u) du``
    evaluated with Gauss-Legendre nodes; the value at ``k = 0`` is 1.
    """
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    t, w = np.polynomial.legendre.leggauss(nodes)
    u = 0.5 * (t + 1.0)
    w = 0.5 * w
    prof = bump_profile(u, d)
    nu = d / 2 - 1
    out = np.empty_like(kappa)
    small = kappa < 1e-8
    out[small] = 1.0
    k = kappa[~small]
    if k.size:
        ku = np.outer(k, u)
        integ = (u ** (d / 2) * prof * w) * special.jv(nu, ku)
        out[~small] = (2 * np.pi) ** (d / 2) * k ** (-nu) * integ.sum(axis=1)
    return out


def auxiliary_K(x, eps, s):
    """Capped power ``|x|^{-(s+2)}``, constant ``(4 eps)^{-(s+2)}`` inside ``4 eps``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1) if x.ndim else np.abs(x)
    return np.maximum(r, 4.0 * eps) ** (-(s + 2.0))


# ----------------------------------------------------------------------------
# Radial convolution profiles

def _sph_mean(r, rho, s, d):
    """Mean of ``|x - y|^{-s}`` over ``|y| = rho`` with ``|x| = r``, and its r-derivative."""
    a = s / 2.0
    b = 1.0 + (s - d) / 2.0
    c = d / 2.0
    if r > rho:
        z = (rho / r) ** 2
        F = special.hyp2f1(a, b, c, z)
        dF = a * b / c * special.hyp2f1(a + 1, b + 1, c + 1, z) if b != 0.0 else 0.0
        M = r ** (-s) * F
        dM = -(r ** (-s - 1.0)) * (s * F + 2.0 * z * dF)
    else:
        z = (r / rho) ** 2
        F = special.hyp2f1(a, b, c, z)
        dF = a * b / c * special.hyp2f1(a + 1, b + 1, c + 1, z) if b != 0.0 else 0.0
        M = rho ** (-s) * F
        dM = rho ** (-s) * dF * 2.0 * r / (rho * rho)
    return M, dM


def _profile_at(r, eps, s, d):
    """``(v, g)`` at radius ``r`` by adaptive quadrature over the mollifier radius."""
    area = sphere_area(d)
    C = bump_constant(d)

    def weight(u):
        return u ** (d - 1) * C * math.exp(-1.0 / (1.0 - u * u)) if u < 1.0 else 0.0

    pts = [r / eps] if 0.0 < r / eps < 1.0 else None
    opts = dict(epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=400, points=pts, full_output=1)
    v, ev, *info_v = integrate.quad(lambda u: weight(u) * _sph_mean(r, eps * u, s, d)[0], 0.0, 1.0, **opts)
    g, eg, *info_g = integrate.quad(lambda u: weight(u) * _sph_mean(r, eps * u, s, d)[1], 0.0, 1.0, **opts)
    # the integrands are bounded, so an absolute error well above the relative target signals failure
    for val, err in ((v, ev), (g, eg)):
        if err > 1e-9 * max(abs(val), 1e-300) and err > 1e-12:
            raise QuadratureError(f"radial quadrature did not converge at r={r:.6g}", radius=r, residual=err)
    return area * v, area * g


def _q_origin(eps, s, d):
    """Limit of ``g(r)/r`` at 0, equal to ``Laplacian(V * chi_eps)(0) / d``."""
    area = sphere_area(d)
    if s == d - 2:
        return -(d - 2) * area * bump_constant(d) * math.exp(-1.0) * eps ** (-d) / d
    C = bump_constant(d)
    val, err = integrate.quad(lambda u: u ** (d - 3 - s) * C * math.exp(-1.0 / (1.0 - u * u)),
                              0.0, 1.0, epsabs=0.0, epsrel=1e-13, limit=200)
    return area * s * (s - d + 2) / d * val * eps ** (-s - 2)


def default_radii(eps, n_points, r_max):
    """Uniform grid on ``[0, 4 eps]`` followed by a geometric grid to ``r_max``."""
    n_near = n_points // 2
    r_join = 4.0 * eps
    if r_max <= r_join:
        raise ConfigError(f"r_max={r_max} must exceed 4*eps={r_join}", "table-rmax")
    near = np.linspace(0.0, r_join, n_near)
    n_far = n_points - n_near
    far = r_join * (r_max / r_join) ** (np.arange(1, n_far + 1) / n_far)
    far[-1] = r_max
    return np.concatenate([near, far]), n_near


@dataclass
class KernelTable:
    """Radial profile of ``V * chi_eps`` for one ``(s, d, eps)``."""

    radii: np.ndarray
    v_eps: np.ndarray
    g_eps: np.ndarray
    q_eps: np.ndarray
    eps: float
    s: float
    d: int

    def __post_init__(self):
        r = self.radii
        self.n_near = int(np.searchsorted(r, 4.0 * self.eps * (1 + 1e-12), side="right"))
        self.h_near = float(r[1] - r[0])
        self.r_join = float(r[self.n_near - 1])
        self.log_ratio = float(np.log(r[self.n_near] / r[self.n_near - 1]))
        self.r_max = float(r[-1])
        self.q_slope = PchipInterpolator(r, self.q_eps).derivative()(r)
        # radius beyond which the closed form is exact
        self.r_exact = self.eps if self.s == self.d - 2 else self.r_max

    @property
    def params(self):
        """Packed parameters for the compiled lookup."""
        return np.array([self.h_near, float(self.n_near), self.r_join, self.log_ratio,
                         self.r_max, self.s, self.r_exact])

    def q(self, r):
        """``g(r)/r`` at arbitrary radii."""
        r = np.asarray(r, dtype=float)
        out = np.empty(r.size)
        _q_many(r.ravel(), self.radii, self.q_eps, self.q_slope, self.params, out)
        return out.reshape(r.shape)

    def g(self, r):
        return self.q(r) * np.asarray(r, dtype=float)


def _cache_path(s, d, eps, n_points, r_max, cache_dir):
    key = f"v{TABLE_VERSION}|{s!r}|{d}|{eps!r}|{n_points}|{r_max!r}"
    digest = hashlib.sha256(key.encode()).hexdigest()[:20]
    return Path(cache_dir) / f"kernel_{digest}.msadk"


def default_cache_dir():
    env = os.environ.get("MSAD_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "msad"


def build_kernel_table(riesz: RieszSpec, moll: MollifierSpec, n_points=2048, r_max=96.0,
                       cache=True, cache_dir=None) -> KernelTable:
    """Tabulate ``V * chi_eps``, its radial derivative and ``g/r``.

    Results are cached on disk (``MSAD_CACHE_DIR``) keyed by all parameters.
    """
    if n_points < 64:
        raise ConfigError(f"n_points={n_points} must be >= 64", "table-points")
    if moll.d != riesz.d:
        raise ConfigError("mollifier and potential dimensions differ", "table-dim")
    eps, s, d = float(moll.epsilon), float(riesz.s), int(riesz.d)
    path = None
    if cache:
        from .io import read_kernel_table, write_kernel_table

        path = _cache_path(s, d, eps, n_points, r_max, cache_dir or default_cache_dir())
        if path.exists():
            return read_kernel_table(path)
    radii, n_near = default_radii(eps, n_points, r_max)
    v = np.empty_like(radii)
    g = np.empty_like(radii)
    for i, r in enumerate(radii):
        v[i], g[i] = _profile_at(r, eps, s, d)
    g[0] = 0.0
    q = np.empty_like(radii)
    q[0] = _q_origin(eps, s, d)
    q[1:] = g[1:] / radii[1:]
    table = KernelTable(radii, v, g, q, eps, s, d)
    if cache:
        write_kernel_table(table, path)
    return table


# ----------------------------------------------------------------------------
# Compiled lookup

@nb.njit(cache=True, inline="always")
def q_lookup(r, radii, qv, qs, prm):
    """``g(r)/r`` by piecewise cubic Hermite interpolation of the table."""
    h_near = prm[0]
    n_near = int(prm[1])
    r_join = prm[2]
    log_ratio = prm[3]
    r_max = prm[4]
    s = prm[5]
    if r >= prm[6]:
        return -s * r ** (-s - 2.0)
    if r <= r_join:
        i = int(r / h_near)
        if i > n_near - 2:
            i = n_near - 2
    else:
        i = n_near - 1 + int(math.log(r / r_join) / log_ratio)
        if i > radii.shape[0] - 2:
            i = radii.shape[0] - 2
        # guard against rounding in the log index
        if r < radii[i]:
            i -= 1
        elif r > radii[i + 1]:
            i += 1
    x0 = radii[i]
    hh = radii[i + 1] - x0
    t = (r - x0) / hh
    t2 = t * t
    t3 = t2 * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return h00 * qv[i] + h10 * hh * qs[i] + h01 * qv[i + 1] + h11 * hh * qs[i + 1]


@nb.njit(cache=True)
def _q_many(r, radii, qv, qs, prm, out):
    for k in range(r.shape[0]):
        out[k] = q_lookup(r[k], radii, qv, qs, prm)


def eval_grad_V_eps(x, table: KernelTable, a_entry=1.0):
    """``a * grad(V * chi_eps)(x)``; vectorized over the last axis.

    Zero at the origin; beyond the table the closed form is used.
    """
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    q = table.q(r)
    return (a_entry * q)[..., None] * x


def grad_V(x, s):
    """Unmollified ``grad |x|^{-s} = -s |x|^{-s-2} x``, zero at the origin."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    with np.errstate(divide="ignore"):
        c = np.where(r2 > 0, -s * np.where(r2 > 0, r2, 1.0) ** (-(s + 2) / 2), 0.0)
    return c[..., None] * x


def hessian_norm_profile(table: KernelTable):
    """Frobenius norm of the Hessian of ``V * chi_eps`` at each table radius.

    ``g'`` is taken by centered finite differences on the table grid.
    """
    gp = np.gradient(table.g_eps, table.radii)
    q = table.q_eps
    return np.sqrt(gp ** 2 + (table.d - 1) * q ** 2)


def measure_sup_bounds(table: KernelTable, k: int):
    """Sup over the table of ``|grad^k (V * chi_eps)|`` for ``k`` in {1, 2}."""
    if k == 1:
        return float(np.max(np.abs(table.g_eps)))
    if k == 2:
        return float(np.max(hessian_norm_profile(table)))
    raise ValueError("k must be 1 or 2")


def fit_C3(table: KernelTable, r_sweep_max=None, n_sweep=4000, headroom=1.01):
    """Calibrate the constant in ``|grad V(x+xi) - grad V(x)| <= C3 K(x) |xi|``.

    For each radius r of a sweep, the Hessian norm is maximized over the annulus
    reachable with ``|xi| <= 2 eps`` and divided by ``K(r)``; the largest ratio
    (with a little headroom) is returned.
    """
    eps = table.eps
    hn = hessian_norm_profile(table)
    rr = table.radii
    if r_sweep_max is None:
        r_sweep_max = min(64 * eps, table.r_max / 2)
    sweep = np.linspace(0.0, r_sweep_max, n_sweep)
    # prefix-free running max over windows via searchsorted on the table grid
    lo = np.searchsorted(rr, np.maximum(sweep - 2 * eps, 0.0), side="left")
    hi = np.searchsorted(rr, sweep + 2 * eps, side="right")
    ratios = np.empty(n_sweep)
    for i in range(n_sweep):
        a, b = max(lo[i] - 1, 0), min(hi[i] + 1, rr.size)
        ratios[i] = hn[a:b].max() / auxiliary_K(sweep[i], eps, table.s)
    return float(ratios.max() * headroom)
