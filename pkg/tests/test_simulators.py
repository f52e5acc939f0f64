import math

import numpy as np
import pytest
from scipy import stats

from scabi.densities import spawn_rngs
from scabi.errors import ContractError
from scabi.simulators import (
    HES1_REAL_DATA,
    TASKS,
    SimulationSet,
    hes1_rhs,
    hes1_trajectory,
    load_simulations,
    make_task,
    ode_integrate,
    save_simulations,
    sir_infected_fraction,
    source_intensity,
    two_moons_shift,
)


def midpoint_grid(lo, hi, n):
    h = (hi - lo) / n
    return lo + h * (np.arange(n) + 0.5), h


@pytest.mark.parametrize("name", sorted(TASKS))
def test_simulate_shape_and_determinism(name):
    task = make_task(name)
    theta = task.prior_sample(3, np.random.default_rng(0))
    a = task.simulate(theta, spawn_rngs(1, 3))
    b = task.simulate(theta, spawn_rngs(1, 3))
    assert a.shape == (3,) + tuple(task.data_shape)
    np.testing.assert_array_equal(a, b)
    single = task.simulate(theta[0], spawn_rngs(1, 1)[0])
    np.testing.assert_array_equal(single, a[0])
    assert np.isfinite(task.loglik(a, theta)).all()


def test_simulate_needs_one_generator_per_row():
    task = make_task("gmm")
    with pytest.raises(ContractError):
        task.simulate(np.zeros((3, 2)), spawn_rngs(0, 2))


def test_unknown_task():
    with pytest.raises(ContractError):
        make_task("lotka")


# --- Gaussian mixture -------------------------------------------------------


def test_gmm_coincident_components():
    task = make_task("gmm", J=1)
    value = task.loglik(np.zeros((1, 2)), np.zeros(2))
    assert value == pytest.approx(-math.log(2 * math.pi) + math.log(2), abs=1e-12)
    assert value == pytest.approx(-1.14473, abs=1e-5)


def test_gmm_loglik_symmetric_exactly():
    task = make_task("gmm")
    rng = np.random.default_rng(0)
    theta = rng.normal(size=(50, 2))
    Y = rng.normal(size=(50, 10, 2))
    np.testing.assert_array_equal(task.loglik(Y, theta), task.loglik(Y, -theta))


def test_gmm_single_row_integrates_to_one():
    task = make_task("gmm", J=1)
    mid, h = midpoint_grid(-7, 7, 600)
    grid = np.stack(np.meshgrid(mid, mid, indexing="ij"), -1).reshape(-1, 1, 2)
    total = np.exp(task.loglik(grid, np.array([0.8, -0.5]))).sum() * h * h
    assert total == pytest.approx(1.0, abs=1e-2)


def test_gmm_kde_rank_correlation():
    task = make_task("gmm", J=1)
    theta = np.array([1.0, 0.5])
    rng = np.random.default_rng(1)
    n = 1_000_000
    sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    draws = sign[:, None] * theta + math.sqrt(0.5) * rng.standard_normal((n, 2))
    edges = np.linspace(-3, 3, 41)
    hist, _, _ = np.histogram2d(draws[:, 0], draws[:, 1], bins=[edges, edges], density=True)
    mid = 0.5 * (edges[1:] + edges[:-1])
    grid = np.stack(np.meshgrid(mid, mid, indexing="ij"), -1).reshape(-1, 1, 2)
    dens = np.exp(task.loglik(grid, theta))
    assert stats.spearmanr(hist.ravel(), dens).statistic > 0.95


def test_gmm_simulator_matches_mixture_moments():
    task = make_task("gmm", J=10)
    theta = np.array([1.5, -0.5])
    Y = task.simulate(np.repeat(theta[None], 2000, 0), spawn_rngs(3, 2000)).reshape(-1, 2)
    # E[y] = 0, E[y y^T] = theta theta^T + I/2
    assert np.abs(Y.mean(0)).max() < 0.05
    np.testing.assert_allclose(np.cov(Y.T), np.outer(theta, theta) + 0.5 * np.eye(2), atol=0.05)


# --- two moons --------------------------------------------------------------


def test_two_moons_reference_value():
    task = make_task("two_moons")
    value = task.loglik(np.array([[0.35, 0.0]]), np.zeros(2))
    expected = math.log(1 / (0.01 * math.sqrt(2 * math.pi))) + math.log(1 / math.pi) + math.log(1 / 0.1)
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(4.84409, abs=1e-5)


def _two_moons_draws(theta, n, rng):
    alpha = rng.uniform(-math.pi / 2, math.pi / 2, n)
    r = rng.normal(0.1, 0.01, n)
    x = np.stack([r * np.cos(alpha) + 0.25, r * np.sin(alpha)], -1)
    return x + two_moons_shift(theta)


def test_two_moons_density_matches_histogram_oracle():
    theta = np.zeros(2)
    draws = _two_moons_draws(theta, 1_000_000, np.random.default_rng(2))
    half = 0.002
    inside = (np.abs(draws[:, 0] - 0.35) < half) & (np.abs(draws[:, 1]) < half)
    empirical = math.log(inside.mean() / (2 * half) ** 2)
    assert empirical == pytest.approx(4.84409, abs=0.06)
    assert abs(empirical - 7.1474) > 2


def test_two_moons_kde_rank_correlation():
    task = make_task("two_moons")
    theta = np.array([0.3, -0.6])
    draws = _two_moons_draws(theta, 1_000_000, np.random.default_rng(3))
    lo = draws.min(0)
    hi = draws.max(0)
    ex = np.linspace(lo[0], hi[0], 41)
    ey = np.linspace(lo[1], hi[1], 41)
    hist, _, _ = np.histogram2d(draws[:, 0], draws[:, 1], bins=[ex, ey], density=True)
    gx, gy = 0.5 * (ex[1:] + ex[:-1]), 0.5 * (ey[1:] + ey[:-1])
    grid = np.stack(np.meshgrid(gx, gy, indexing="ij"), -1).reshape(-1, 1, 2)
    dens = np.exp(task.loglik(grid, theta))
    mask = (hist.ravel() > 0) | (dens > 0)
    assert stats.spearmanr(hist.ravel()[mask], dens[mask]).statistic > 0.95


def test_two_moons_simulator_matches_oracle_process():
    task = make_task("two_moons")
    theta = np.array([0.5, 1.2])
    sims = task.simulate(np.repeat(theta[None], 5000, 0), spawn_rngs(4, 5000))[:, 0]
    oracle = _two_moons_draws(theta, 5000, np.random.default_rng(5))
    for d in range(2):
        assert stats.ks_2samp(sims[:, d], oracle[:, d]).pvalue > 1e-3


def test_two_moons_integrates_to_one():
    task = make_task("two_moons")
    theta = np.array([-0.4, 0.9])
    shift = two_moons_shift(theta)
    gx, hx = midpoint_grid(shift[0] + 0.2, shift[0] + 0.4, 800)
    gy, hy = midpoint_grid(shift[1] - 0.15, shift[1] + 0.15, 1200)
    grid = np.stack(np.meshgrid(gx, gy, indexing="ij"), -1).reshape(-1, 1, 2)
    total = np.exp(task.loglik(grid, theta)).sum() * hx * hy
    assert total == pytest.approx(1.0, abs=1e-2)


def test_two_moons_support_and_invariance():
    task = make_task("two_moons")
    assert task.loglik(np.array([[0.15, 0.0]]), np.zeros(2)) == -np.inf
    assert task.loglik(np.array([[0.25, 0.0]]), np.zeros(2)) == -np.inf
    rng = np.random.default_rng(6)
    theta = rng.uniform(-2, 2, (100, 2))
    mirrored = np.stack([-theta[:, 1], -theta[:, 0]], -1)
    Y = rng.normal(0, 0.5, (100, 1, 2))
    np.testing.assert_array_equal(task.loglik(Y, theta), task.loglik(Y, mirrored))


# --- source location --------------------------------------------------------


def test_source_intensity_arithmetic():
    c = make_task("source").constants
    assert source_intensity(np.zeros(2), np.zeros((1, 2)), c)[0] == pytest.approx(0.1 + 1e4)
    value = source_intensity(np.zeros(2), np.array([[1.0, 0.0]]), c)[0]
    assert value == pytest.approx(0.1 + 1 / (1 + 1e-4), abs=1e-12)
    assert value == pytest.approx(1.09990, abs=1e-5)


def test_source_grid_is_fixed_lattice():
    X = np.asarray(make_task("source").constants["points"])
    assert X.shape == (30, 2)
    assert X.min() == -4 and X.max() == 4
    assert len(np.unique(X, axis=0)) == 30


def test_source_single_point_integrates_to_one():
    task = make_task("source", points=[[1.0, -2.0]])
    theta = np.array([0.3, -1.5])
    nu = source_intensity(theta, np.array([[1.0, -2.0]]), task.constants)[0]
    y, h = midpoint_grid(nu - 6, nu + 6, 20_000)
    Y = np.stack([np.full_like(y, 1.0), np.full_like(y, -2.0), y], -1)[:, None, :]
    total = np.exp(task.loglik(Y, theta)).sum() * h
    assert total == pytest.approx(1.0, abs=1e-3)


# --- ODE tasks --------------------------------------------------------------


def test_rk4_exponential_decay():
    times = np.arange(1, 11, dtype=float)
    out = ode_integrate(lambda t, y: -0.7 * y, np.array([2.0]), times, 0.05)
    np.testing.assert_allclose(out[:, 0], 2.0 * np.exp(-0.7 * times), rtol=1e-6)


def test_ode_rejects_off_grid_times():
    with pytest.raises(ContractError):
        ode_integrate(lambda t, y: -y, np.array([1.0]), [0.33], 0.1)


def test_hes1_real_data_and_shapes():
    np.testing.assert_array_equal(HES1_REAL_DATA, [1.20, 5.90, 4.58, 2.64, 5.38, 6.42, 5.60, 4.48])
    task = make_task("hes1")
    assert task.data_shape == (8, 1)
    assert task.constants["times"] == [30.0 * k for k in range(1, 9)]


def test_hes1_protein_decays_without_transcription():
    rhs = hes1_rhs(np.array([1.5, 8.0, 0.04, 0.0]), 0.03)
    rng = np.random.default_rng(0)
    states = np.column_stack([np.zeros(100), rng.uniform(0.01, 10, 100), rng.uniform(0, 10, 100)])
    assert np.all(rhs(0.0, states)[:, 1] < 0)


def test_hes1_step_halving():
    task = make_task("hes1")
    theta = task.prior_sample(5, np.random.default_rng(11))
    coarse = hes1_trajectory(theta, task.constants)
    fine = hes1_trajectory(theta, task.constants, step=task.constants["step"] / 2)
    assert np.abs(coarse - fine).max() < 1e-4


def test_hes1_log_space_prior_includes_jacobian():
    task = make_task("hes1")
    theta = task.prior_sample(20, np.random.default_rng(12))
    x = np.exp(theta)
    shape, rate = [2.0, 10.0, 2.0, 2.0], [1.0, 1.0, 50.0, 50.0]
    expected = sum(stats.gamma(a, scale=1 / b).logpdf(x[:, i]) for i, (a, b) in enumerate(zip(shape, rate)))
    np.testing.assert_allclose(task.prior_log_prob(theta), expected + theta.sum(-1), rtol=1e-10)


def test_sir_beta_zero_infections_non_increasing():
    task = make_task("sir")
    frac = sir_infected_fraction(np.array([-np.inf, math.log(0.1)]), task.constants)
    assert np.all(np.diff(frac) <= 0)


def test_sir_fast_recovery_extinguishes():
    task = make_task("sir", step=0.01)
    theta = np.array([math.log(0.4), math.log(50.0)])
    frac = sir_infected_fraction(theta, task.constants)
    assert frac[-1] < 1e-12
    Y = task.simulate(theta, np.random.default_rng(0))
    assert np.all(Y[-100:] == 0)


def test_sir_step_halving():
    task = make_task("sir")
    theta = task.prior_sample(5, np.random.default_rng(13))
    coarse = sir_infected_fraction(theta, task.constants)
    fine = sir_infected_fraction(theta, task.constants, step=task.constants["step"] / 2)
    assert np.abs(coarse - fine).max() < 1e-4


def test_sir_observations_are_binomial_counts():
    task = make_task("sir")
    Y = task.simulate(task.prior_sample(4, np.random.default_rng(1)), spawn_rngs(2, 4))
    assert Y.shape == (4, 160, 1)
    assert np.all((Y >= 0) & (Y <= 1000) & (Y == np.round(Y)))


# --- simulation-set files ---------------------------------------------------


def _set(seed=0):
    rng = np.random.default_rng(seed)
    return SimulationSet("gmm", seed, rng.normal(size=(5, 2)), rng.normal(size=(5, 10, 2)), 1, {"domain": 1})


def test_simulation_set_round_trip(tmp_path):
    sims = _set()
    path = save_simulations(sims, tmp_path / "a.simset")
    back = load_simulations(path)
    np.testing.assert_array_equal(back.theta, sims.theta)
    np.testing.assert_array_equal(back.Y, sims.Y)
    assert back.header() == sims.header()
    assert back.digest() == sims.digest()


@pytest.mark.parametrize("damage", ["truncate", "magic"])
def test_simulation_set_corruption_detected(tmp_path, damage):
    path = save_simulations(_set(), tmp_path / "a.simset")
    raw = path.read_bytes()
    path.write_bytes(raw[:-8] if damage == "truncate" else b"XX" + raw[2:])
    with pytest.raises(ContractError):
        load_simulations(path)
