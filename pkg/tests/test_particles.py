import numpy as np
import pytest

from msad.errors import ConfigError, MsadError
from msad.kernels import MollifierSpec, RieszSpec, build_kernel_table, eval_grad_V_eps
from msad.particles import (
    ParticleState,
    SimConfig,
    SpeciesConfig,
    compute_drift,
    drift_from_field,
    dt_cap,
    interpolate_vector_field,
    pair_sum,
    sample_initial,
    simulate,
    simulate_coupled,
    step,
)
from msad.pde import DensityField, Grid, Timeline, gaussian_density, gradient_kernel_hat

R3 = RieszSpec(1.0, 3)
EPS = 0.4


@pytest.fixture(scope="module")
def table():
    return build_kernel_table(R3, MollifierSpec.from_epsilon(EPS), 512)


def make_config(N=64, a=None, n=1, sigma=1.0, width=2.0, T=None, dt=None, seed=3, n_outputs=2):
    a = np.zeros((n, n)) if a is None else a
    species = [SpeciesConfig(sigma, (0.0, 0.0, 0.0), width) for _ in range(n)]
    moll = MollifierSpec.from_epsilon(EPS)
    T = dt_cap(EPS, 1.0) * 4 if T is None else T
    return SimConfig(N, R3, moll, a, species, T, dt, seed, 12.0, n_outputs)


def test_pair_sum_matches_pointwise(table):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(700, 3))
    y = rng.normal(size=(90, 3))
    got = pair_sum(x, y, table)
    ref = np.zeros_like(x)
    for j in range(y.shape[0]):
        ref += eval_grad_V_eps(x - y[j], table)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_single_particle_has_zero_drift(table):
    pos = np.array([[[0.3, -0.2, 1.0]]])
    np.testing.assert_array_equal(compute_drift(pos, table, [[1.0]]), 0.0)


def test_pair_drifts_cancel(table):
    pos = np.array([[[0.1, 0.0, 0.0], [0.5, 0.2, -0.1]]])
    dr = compute_drift(pos, table, [[0.7]])
    np.testing.assert_allclose(dr.sum(axis=1), 0.0, atol=1e-15)
    # repulsive: each particle is pushed away from the other
    assert np.dot(dr[0, 1], pos[0, 1] - pos[0, 0]) > 0


def test_attractive_cross_species_pair(table):
    pos = np.array([[[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]])
    a = np.array([[0.0, -0.5], [-0.5, 0.0]])
    dr = compute_drift(pos, table, a)
    assert dr[0, 0, 0] > 0 and dr[1, 0, 0] < 0
    # radial derivative of the mollified profile at r=1 is -1 (Coulomb, r > eps)
    np.testing.assert_allclose(dr[0, 0], [0.5, 0, 0], rtol=1e-8)


def test_antisymmetry_of_intraspecies_drift(table):
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(1, 200, 3))
    dr = compute_drift(pos, table, [[1.0]])
    assert np.abs(dr.sum(axis=1)).max() < 1e-12


def test_nonfinite_drift_names_pair(table):
    pos = np.array([[[0.0, 0.0, 0.0], [np.nan, 0.0, 0.0]]])
    with pytest.raises(MsadError, match="species 0, index"):
        compute_drift(pos, table, [[1.0]])


def test_sampling_deterministic_and_centered():
    c1 = make_config(N=2000)
    a = sample_initial(c1).positions
    b = sample_initial(c1).positions
    np.testing.assert_array_equal(a, b)
    assert np.abs(a.mean(axis=1)).max() < 3 * 2.0 / np.sqrt(2000)
    assert not np.array_equal(a, sample_initial(make_config(N=2000, seed=4)).positions)


def test_zero_width_puts_everything_at_center():
    cfg = make_config(N=10, width=0.0)
    np.testing.assert_array_equal(sample_initial(cfg).positions, 0.0)


def test_dt_cap_rejected():
    cap = dt_cap(EPS, 1.0)
    with pytest.raises(ConfigError) as exc:
        make_config(dt=2 * cap, T=1.0)
    assert exc.value.constraint == "dt-cap"
    assert f"{cap:.6g}" in str(exc.value)


def test_one_step_when_T_equals_dt(table):
    cap = dt_cap(EPS, 1.0)
    cfg = make_config(T=cap, dt=cap)
    snaps = simulate(cfg, table)
    assert cfg.n_steps == 1
    assert [s.step_index for s in snaps] == [0, 1]


def test_brownian_variance(table):
    cfg = make_config(N=20000, sigma=0.7)
    s0 = sample_initial(cfg)
    s1 = step(s0, cfg, table)
    inc = (s1.positions - s0.positions).reshape(-1)
    assert inc.var() == pytest.approx(2 * 0.7 * cfg.dt, rel=0.05)


def test_repulsive_pair_separates(table):
    # tiny noise: distance grows when the drift dominates the Brownian increments
    cfg = make_config(N=2, a=np.array([[50.0]]), sigma=1e-12, T=dt_cap(EPS, 1.0) * 20)
    state = ParticleState(0.0, np.array([[[0.0, 0, 0], [0.3, 0, 0]]]), 0)
    dist = [0.3]
    for _ in range(cfg.n_steps):
        state = step(state, cfg, table)
        dist.append(np.linalg.norm(state.positions[0, 1] - state.positions[0, 0]))
    assert np.all(np.diff(dist) > 0)


def test_simulate_is_reproducible(table):
    cfg = make_config(N=128, a=np.array([[0.05, -0.03], [-0.03, 0.05]]), n=2)
    a = simulate(cfg, table)
    b = simulate(cfg, table)
    for x, y in zip(a, b):
        assert x.positions.tobytes() == y.positions.tobytes()


def _flat_timeline(cfg, grid):
    f = gaussian_density(grid, np.zeros(3), 2.0)
    vals = np.stack([f] * cfg.n)
    return Timeline([DensityField(vals, k * cfg.dt, grid) for k in range(cfg.n_steps + 1)])


def test_coupled_identical_without_interaction(table):
    grid = Grid(3, 32, 12.0)
    cfg = make_config(N=50, n=2)
    tl = _flat_timeline(cfg, grid)
    X, Xt = simulate_coupled(cfg, table, tl, gradient_kernel_hat(grid, 1.0, EPS))
    for a, b in zip(X, Xt):
        assert np.array_equal(a.positions, b.positions)


def test_coupled_start_and_gap(table):
    grid = Grid(3, 32, 12.0)
    cfg = make_config(N=20, a=np.array([[0.5]]))
    tl = _flat_timeline(cfg, grid)
    X, Xt = simulate_coupled(cfg, table, tl, gradient_kernel_hat(grid, 1.0, EPS))
    assert np.array_equal(X[0].positions, Xt[0].positions)
    assert not np.array_equal(X[-1].positions, Xt[-1].positions)
    bad = Timeline([tl.fields[0], tl.fields[2]] + tl.fields[3:])
    with pytest.raises(MsadError, match="timeline"):
        simulate_coupled(cfg, table, bad, gradient_kernel_hat(grid, 1.0, EPS))


def test_drift_from_uniform_field_is_zero():
    grid = Grid(3, 32, 6.0)
    vals = np.full((1,) + grid.shape, 1.0 / (2 * grid.L) ** 3)
    fld = DensityField(vals, 0.0, grid)
    x = np.random.default_rng(2).uniform(-5, 5, size=(20, 3))
    out = drift_from_field(x, fld, gradient_kernel_hat(grid, 1.0, 0.5), [[1.0]], 0)
    assert np.abs(out).max() < 1e-12


def test_interpolation_exact_at_nodes():
    grid = Grid(3, 32, 6.0)
    u = np.random.default_rng(3).normal(size=(3,) + grid.shape)
    idx = [(0, 0, 0), (5, 17, 31), (31, 2, 9)]
    x = np.array([[grid.nodes()[i] for i in ix] for ix in idx])
    vals, wraps = interpolate_vector_field(u, grid, x)
    assert wraps == 0
    for k, ix in enumerate(idx):
        assert np.array_equal(vals[k], u[(slice(None),) + ix])


def test_interpolation_second_order():
    x = np.random.default_rng(4).uniform(-3, 3, size=(200, 3))
    errs = []
    for m in (32, 64):
        grid = Grid(3, m, 6.0)
        c = grid.coords()
        u = np.stack([np.sin(np.pi * c[0] / 6) * np.cos(np.pi * c[1] / 6)] * 3)
        vals, _ = interpolate_vector_field(u, grid, x)
        exact = np.sin(np.pi * x[:, 0] / 6) * np.cos(np.pi * x[:, 1] / 6)
        errs.append(np.abs(vals[:, 0] - exact).max())
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_interpolation_wraps_outside_points():
    grid = Grid(3, 32, 6.0)
    u = np.random.default_rng(5).normal(size=(3,) + grid.shape)
    x = np.array([[1.1, -0.4, 2.3]])
    inside, _ = interpolate_vector_field(u, grid, x)
    outside, wraps = interpolate_vector_field(u, grid, x + np.array([12.0, 0, 0]))
    assert wraps == 1
    np.testing.assert_allclose(inside, outside, atol=1e-12)
