import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msad.errors import ConfigError, InvariantViolation, MsadError
from msad.kernels import MollifierSpec, RieszSpec, build_kernel_table
from msad.metrics import (
    Histogram,
    bin_field,
    bins_per_dim,
    box_edges,
    ckp_check,
    compare_fields,
    coupling_event,
    empirical_density,
    lln_statistic,
    marginal_histogram,
    relative_entropy,
    smoothed_relative_entropy,
    subadditivity_check,
    unsupported_bins,
    wilson_interval,
)
from msad.pde import DensityField, Grid, gaussian_density

masses = st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=12)


def test_entropy_examples():
    assert relative_entropy([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert relative_entropy([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.143841, abs=1e-6)
    assert relative_entropy([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), rel=1e-14)


def test_entropy_finite_when_ratio_underflows():
    p = np.array([1e-300, 1.0 - 1e-300])
    q = np.array([0.5, 0.5])
    assert relative_entropy(p, q) == pytest.approx(math.log(2), rel=1e-12)


def test_unsupported_bins_flagged():
    p, q = np.array([0.2, 0.3, 0.5]), np.array([0.5, 0.0, 0.5])
    assert relative_entropy(p, q) == math.inf
    assert unsupported_bins(p, q) == [(1,)]
    assert math.isfinite(smoothed_relative_entropy(p, q))


def test_smoothed_entropy_of_identical_sparse_histograms_is_zero():
    p = np.zeros(10_000)
    p[:3] = [0.2, 0.3, 0.5]
    assert smoothed_relative_entropy(p, p) == 0.0


def test_ckp_examples():
    rep = ckp_check(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    assert rep.l1 == 0 and rep.ckp_margin == 0
    rep = ckp_check(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
    assert rep.l1 == pytest.approx(0.5)
    assert rep.ckp_margin == pytest.approx(0.03636, abs=1e-5)


@settings(max_examples=300, deadline=None)
@given(masses, st.data())
def test_gibbs_and_ckp_hold(p, data):
    q = data.draw(st.lists(st.floats(1e-6, 1.0), min_size=len(p), max_size=len(p)))
    p = np.array(p) / np.sum(p)
    q = np.array(q) / np.sum(q)
    rep = ckp_check(p, q)
    assert rep.rel_entropy >= -1e-12
    assert rep.ckp_margin >= -1e-9


def test_histogram_invariants():
    with pytest.raises(MsadError):
        Histogram((np.arange(3.0),), np.array([0.5, 0.6]))
    with pytest.raises(MsadError):
        Histogram((np.arange(3.0),), np.array([1.5, -0.5]))
    h = Histogram.from_masses([1, 3])
    np.testing.assert_allclose(h.masses, [0.25, 0.75])


def test_empirical_density_mass_and_single_particle():
    g = Grid(3, 32, 4.0)
    x = np.random.default_rng(0).normal(size=(500, 3))
    f = empirical_density(x, 3 * g.h, g)
    assert f.sum() * g.cell_volume == pytest.approx(1.0, abs=1e-10)
    node = np.array([[g.nodes()[16]] * 3])
    one = empirical_density(node, 3 * g.h, g)
    c = g.coords() - node[0][:, None, None, None]
    u2 = np.sum(c * c, axis=0) / (3 * g.h) ** 2
    bump = np.where(u2 < 1, np.exp(-1 / (1 - np.minimum(u2, 0.999999))), 0.0)
    np.testing.assert_allclose(one, bump / (bump.sum() * g.cell_volume), rtol=1e-12, atol=1e-14)
    with pytest.raises(ConfigError):
        empirical_density(x, g.h, g)


def test_empirical_density_approaches_gaussian():
    g = Grid(3, 32, 8.0)
    ref = gaussian_density(g, np.zeros(3), 1.5, cutoff=None)
    errs = []
    for N in (1000, 16000):
        x = np.random.default_rng(N).normal(scale=1.5, size=(N, 3))
        errs.append(np.abs(empirical_density(x, 2 * g.h, g) - ref).sum() * g.cell_volume)
    assert errs[1] < errs[0]


def test_bins_per_dim():
    assert bins_per_dim(512, 3) == 6
    assert bins_per_dim(8192, 3) == 12


def test_marginal_histogram_shape_and_errors():
    rng = np.random.default_rng(1)
    samples = rng.normal(size=(40, 2, 10, 1))
    edges = box_edges(4.0, 8, 2)
    h = marginal_histogram(samples, [1, 1], edges)
    assert h.masses.shape == (8, 8) and h.masses.sum() == pytest.approx(1.0)
    with pytest.raises(ConfigError, match="reduce K"):
        marginal_histogram(rng.normal(size=(40, 2, 10, 3)), [1, 1], box_edges(4.0, 4, 6))
    with pytest.raises(ConfigError):
        marginal_histogram(samples[:10], [1, 1], edges)


def test_two_species_marginal_is_nearly_product():
    rng = np.random.default_rng(2)
    samples = rng.normal(size=(400, 2, 50, 1))
    edges = box_edges(4.0, 6, 2)
    joint = marginal_histogram(samples, [1, 1], edges).masses
    prod = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    mi = relative_entropy(joint, prod)
    # mutual information noise floor ~ (bins-1)^2 / (2 * samples)
    assert mi < 5 * 25 / (2 * 400 * 50)


def test_one_particle_marginal_matches_binned_field():
    g = Grid(3, 32, 8.0)
    f = gaussian_density(g, np.zeros(3), 1.0, cutoff=None)
    edges = box_edges(g.L, 6, 3)
    ref = bin_field(f, g, edges)
    errs = []
    for reps in (40, 640):
        samples = np.random.default_rng(reps).normal(size=(reps, 1, 100, 3))
        errs.append(ckp_check(marginal_histogram(samples, [1], edges), ref, smoothed=True).l1)
    assert errs[1] < errs[0] / 2


def test_bin_field_conserves_mass():
    g = Grid(3, 32, 8.0)
    f = gaussian_density(g, np.array([0.3, -0.2, 0.1]), 1.0)
    h = bin_field(f, g, box_edges(g.L, 5, 3))
    assert h.masses.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def lln_setup():
    g = Grid(3, 32, 12.0)
    f = gaussian_density(g, np.zeros(3), 2.0)
    fld = DensityField(np.stack([f, f]), 0.0, g)
    tab = build_kernel_table(RieszSpec(1.0, 3), MollifierSpec.from_epsilon(0.4), 512)
    x = np.random.default_rng(3).normal(scale=2.0, size=(2, 300, 3))
    return fld, tab, x


def test_lln_trivial_test_functions(lln_setup):
    fld, tab, x = lln_setup
    r = lln_statistic(x, fld, tab, 0.3, "zero")
    assert r.max_deviation == 0 and not r.exceeded
    r = lln_statistic(x, fld, tab, 0.3, 2.5)
    assert r.max_deviation < 1e-12 and not r.exceeded


def test_lln_statistic_grad_and_K(lln_setup):
    fld, tab, x = lln_setup
    g = lln_statistic(x, fld, tab, 0.0, "grad")
    assert 0 < g.max_deviation < 1.0 and not g.exceeded
    k = lln_statistic(x, fld, tab, 0.3, "K")
    assert k.max_deviation > 0 and k.threshold == pytest.approx(300 ** -0.3)
    with pytest.raises(ConfigError):
        lln_statistic(x, fld, tab, 0.5)


def test_wilson_interval_closed_form():
    z = 1.959963984540054
    for k, n in ((0, 50), (7, 50), (50, 50), (13, 200)):
        ph = k / n
        c = (ph + z * z / (2 * n)) / (1 + z * z / n)
        w = z / (1 + z * z / n) * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n))
        lo, hi = wilson_interval(k, n)
        assert lo == pytest.approx(max(c - w, 0.0), abs=1e-12)
        assert hi == pytest.approx(min(c + w, 1.0), abs=1e-12)


def test_coupling_event():
    d = np.zeros((60, 3))
    d[:, 2] = np.linspace(0, 1, 60)
    stats = coupling_event(d, [0, 0.25, 0.5], 256, 0.2, 0.1, 1.0)
    assert stats.probability[0] == 0.0 and stats.probability[1] == 0.0
    thr = 256 ** -0.2
    assert stats.probability[2] == pytest.approx(np.mean(d[:, 2] >= thr))
    assert np.all(stats.ci_low <= stats.probability) and np.all(stats.probability <= stats.ci_high)
    with pytest.raises(ConfigError) as exc:
        coupling_event(d, [0, 0.25, 0.5], 256, 0.35, 0.1, 1.0)
    assert exc.value.constraint == "lambda-range"


def _exchangeable_joint(rng, n, N, S):
    w = rng.random((S,) * (n * N))
    out = np.zeros_like(w)
    for perms in itertools.product(*[list(itertools.permutations(range(a * N, (a + 1) * N))) for a in range(n)]):
        axes = [ax for p in perms for ax in p]
        out += w.transpose(axes)
    return out / out.sum()


def test_subadditivity_examples():
    ref = np.array([0.5, 0.5])
    prod = np.multiply.outer(ref, ref)
    r = subadditivity_check(prod, 2, [ref], [1])
    assert r.lhs == 0 and r.rhs == 0 and r.holds
    corr = np.array([[0.4, 0.1], [0.1, 0.4]])
    r = subadditivity_check(corr, 2, [ref], [1])
    assert r.holds and r.lhs <= r.rhs
    r = subadditivity_check(corr, 2, [ref], [2])
    assert r.lhs == pytest.approx(r.rhs, rel=1e-14)


def test_subadditivity_requires_exchangeability():
    joint = np.array([[0.1, 0.5], [0.2, 0.2]])
    with pytest.raises(MsadError, match="exchangeable"):
        subadditivity_check(joint, 2, [np.array([0.5, 0.5])], [1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(1, 2, 3), (1, 3, 2), (2, 2, 2), (1, 4, 2)]))
def test_marginal_entropy_dominated_by_joint(seed, shape):
    n, N, S = shape
    rng = np.random.default_rng(seed)
    joint = _exchangeable_joint(rng, n, N, S)
    refs = [rng.random(S) + 0.1 for _ in range(n)]
    refs = [r / r.sum() for r in refs]
    r = subadditivity_check(joint, N, refs, [1] * n)
    assert r.holds
    full = subadditivity_check(joint, N, refs, [N] * n)
    # data processing: the K-marginal never carries more entropy than the joint
    assert r.lhs <= full.lhs + 1e-12


def test_compare_fields_identical():
    g = Grid(3, 32, 8.0)
    f = gaussian_density(g, np.zeros(3), 1.0)
    rep = compare_fields(f, f, g)
    assert rep.rel_entropy == 0 and rep.l1 == 0 and rep.l2 == 0


def test_ckp_violation_raises(monkeypatch):
    from msad import metrics

    # an entropy below the L1 bound can only come from a bug
    monkeypatch.setattr(metrics, "relative_entropy", lambda p, q: 1e-4)
    with pytest.raises(InvariantViolation, match="CKP"):
        metrics.ckp_check(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
