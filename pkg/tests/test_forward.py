import numpy as np
import pytest

from defaultable import (AtomMeasure, ConfigError, Integrand, TimeGrid, XDynamics,
                         divergence_pathology, forward_integral_poisson,
                         forward_integral_w, independent_intensity, integral_h,
                         ito_formula_check, ito_refinement_study, simulate_ensemble,
                         simulate_path)
from defaultable.forward import forward_integral_w_rows


@pytest.fixture(scope="module")
def grid():
    return TimeGrid(1.0, 64)


@pytest.fixture(scope="module")
def path(grid):
    return simulate_path(grid, 2024)


def test_constant_integrand_telescopes_to_w(path):
    res = forward_integral_w(np.ones(64), path)
    assert np.array_equal(res.path_values, path.wiener_path)


def test_adapted_elementary_equals_left_point_sum_bitwise(grid, path):
    u = Integrand.elementary(grid, [0.0, 0.25, 0.75, 1.0], [0.5, -1.2, 2.0])
    res = forward_integral_w(u, path)
    acc = 0.0
    expected = [0.0]
    for i in range(64):
        acc += u.values[i] * path.wiener_increments[i]
        expected.append(acc)
    assert np.array_equal(res.path_values, np.array(expected))


def test_sign_of_own_increment_gives_absolute_sum(path):
    u = np.where(path.wiener_increments >= 0, 1.0, -1.0)   # anticipating by one cell
    res = forward_integral_w(Integrand(u, "anticipating"), path)
    assert np.isclose(res.path_values[-1], np.abs(path.wiener_increments).sum())


def test_sign_strategy_mean_matches_growth_law():
    # E[sum |dW|] = sqrt(2 n / pi) on n cells of [0, 1]
    n, paths = 16, 100000
    rng = np.random.default_rng(55)
    dw = rng.standard_normal((paths, n)) * np.sqrt(1.0 / n)
    u = np.where(dw >= 0, 1.0, -1.0)
    vals = forward_integral_w_rows(u, dw)[:, -1]
    target = np.sqrt(2.0 * n / np.pi)
    se = vals.std(ddof=1) / np.sqrt(paths)
    assert abs(vals.mean() - target) < 3.0 * se
    assert abs(vals.mean() - target) / target < 0.02


def test_epsilon_scheme_agrees_exactly_at_one_cell(grid, path):
    u = Integrand.elementary(grid, [0.0, 0.5, 1.0], [1.0, -2.0])
    res = forward_integral_w(u, path, scheme="epsilon_limit",
                             epsilons=[grid.dt, 4 * grid.dt, 8 * grid.dt])
    riemann = forward_integral_w(u, path)
    one_cell = res.epsilon_values[grid.dt]
    valid = ~np.isnan(one_cell)
    assert np.array_equal(one_cell[valid], riemann.path_values[valid])
    # convergence table reports every bandwidth at a common node
    assert len(res.convergence) == 3
    eps_list = [e for e, _v in res.convergence]
    assert eps_list == sorted(eps_list)


def test_epsilon_scheme_converges_to_the_riemann_sum_on_average(grid):
    # adapted elementary integrand: the smoothed-quotient values approach the
    # left-point sum as the bandwidth shrinks toward one cell
    u = Integrand.elementary(grid, [0.0, 0.5, 1.0], [1.0, -2.0])
    eps_list = [grid.dt, 4 * grid.dt, 16 * grid.dt]
    gaps = {e: [] for e in eps_list}
    for seed in range(200):
        p = simulate_path(grid, 3000 + seed)
        res = forward_integral_w(u, p, scheme="epsilon_limit", epsilons=eps_list)
        riemann = forward_integral_w(u, p).path_values
        node = 64 - 16 + 1                           # last node shared by all bandwidths
        for e, v in res.convergence:
            gaps[e].append(abs(v - riemann[node]))
    mean_gaps = [np.mean(gaps[e]) for e in eps_list]
    assert mean_gaps[0] == 0.0                       # one-cell bandwidth is exact
    assert mean_gaps[0] < mean_gaps[1] < mean_gaps[2]


def test_epsilon_scheme_rejects_sub_cell_bandwidth(grid, path):
    with pytest.raises(ConfigError):
        forward_integral_w(np.ones(64), path, scheme="epsilon_limit",
                           epsilons=[grid.dt / 2])


def test_linearity_to_roundoff(grid, path):
    rng = np.random.default_rng(1)
    u, v = rng.standard_normal(64), rng.standard_normal(64)
    lhs = forward_integral_w(2.5 * u - 1.5 * v, path).path_values
    rhs = (2.5 * forward_integral_w(u, path).path_values
           - 1.5 * forward_integral_w(v, path).path_values)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_locality_on_grid_aligned_windows(grid, path):
    rng = np.random.default_rng(2)
    u = rng.standard_normal(64)
    a, b = grid.node_index(0.25), grid.node_index(0.75)
    masked = u * ((np.arange(64) >= a) & (np.arange(64) < b))
    full = forward_integral_w(u, path).path_values
    windowed = forward_integral_w(masked, path).path_values
    assert np.isclose(windowed[-1], full[b] - full[a], rtol=1e-12, atol=1e-12)


def test_poisson_integral_zero_integrand(grid):
    nu = AtomMeasure(((1.0, 2.0),))
    p = simulate_path(grid, 3, levy=nu)
    res = forward_integral_poisson(lambda t, z: np.zeros_like(z), p, nu, 1)
    assert np.all(res.path_values == 0.0)


def test_poisson_integral_compensated_sum_is_centered():
    grid = TimeGrid(1.0, 100)
    nu = AtomMeasure(((1.0, 2.0),))
    ens = simulate_ensemble(grid, 20000, 44, levy=nu)
    # vectorized equivalent of the per-path op: identity mark integrand
    raw = np.where(np.isfinite(ens.mark_z[:, :100]), ens.mark_z[:, :100], 0.0).sum(axis=1)
    vals = raw - nu.integrate(lambda z: z, 1) * grid.horizon
    se = vals.std(ddof=1) / np.sqrt(20000)
    assert abs(vals.mean()) < 3.0 * se
    # single-path op agrees with the vectorized arithmetic on path 0
    res = forward_integral_poisson(lambda t, z: z, ens.path(0), nu, 1)
    assert np.isclose(res.path_values[-1], vals[0])


def test_poisson_integral_uncompensated_second_moment():
    grid = TimeGrid(1.0, 100)
    nu = AtomMeasure(((1.0, 2.0),))
    ens = simulate_ensemble(grid, 20000, 45, levy=nu)
    totals = np.empty(200)
    for i in range(200):
        res = forward_integral_poisson(lambda t, z: z * z, ens.path(i), nu, 1)
        totals[i] = res.jump_sum[-1]
    # closed-form moment: E[sum z^2] = rate * T * z^2 = 2
    big = np.where(np.isfinite(ens.mark_z[:, :100]), ens.mark_z[:, :100] ** 2, 0.0).sum(axis=1)
    assert np.allclose(totals, big[:200])
    assert abs(big.mean() - 2.0) / 2.0 < 0.02


def test_integral_h_enumeration(grid):
    ens = simulate_ensemble(grid, 400, 46, mechanism=independent_intensity(1.5))
    kappa, pi = -0.4, 0.5
    u = np.full(64, kappa / (1.0 + kappa * pi))
    for i in range(25):
        p = ens.path(i)
        res = integral_h(u, p)
        count = len(p.default_jumps)
        assert np.isclose(res[-1], count * kappa / (1.0 + kappa * pi))
    empty = ens.path(int(np.argmin(ens.default_flags.sum(axis=1))))
    if not empty.default_flags.any():
        assert np.all(integral_h(u, empty) == 0.0)


def test_ito_identity_function_residual_is_roundoff():
    grid = TimeGrid(1.0, 128)
    nu = AtomMeasure(((0.8, 1.5),))
    dyn = XDynamics(mu=0.3, sigma=0.4, theta=lambda t, z: 0.5 * z, levy=nu,
                    fv_sizes=-0.2, x0=1.0)
    ens = simulate_ensemble(grid, 50, 47, levy=nu, mechanism=independent_intensity(1.0))
    rep = ito_formula_check(dyn, lambda x: x, lambda x: np.ones_like(x),
                            lambda x: np.zeros_like(x), ens)
    assert rep.residual_rms < 1e-12


def test_ito_exponential_residual_decays_at_strong_order_half():
    dyn = XDynamics(mu=0.05, sigma=0.2, x0=0.0)
    reports = ito_refinement_study(dyn, np.exp, np.exp, np.exp, TimeGrid(1.0, 64),
                                   n_paths=1000, seed=48, factors=(16, 4, 1))
    rms = [r.relative_rms for r in reports]      # finest first
    assert rms[0] < rms[1] < rms[2]
    for coarse, fine in ((rms[2], rms[1]), (rms[1], rms[0])):
        ratio = coarse / fine                    # dt quartered -> expect ~2
        assert 1.3 < ratio < 3.0
    assert all(r.passed for r in reports)


def test_ito_with_jumps_residual_small_and_decaying():
    nu = AtomMeasure(((0.5, 2.0),))
    dyn = XDynamics(mu=0.1, sigma=0.25, theta=lambda t, z: z, levy=nu, x0=0.5)
    reports = ito_refinement_study(dyn, np.exp, np.exp, np.exp, TimeGrid(1.0, 64),
                                   n_paths=400, seed=49, factors=(4, 1))
    assert reports[0].relative_rms < reports[1].relative_rms
    assert reports[1].passed


def test_divergence_table_matches_growth_and_damped_floor():
    rows = divergence_pathology([4, 16, 100], 30000, seed=50)
    by_n = {r.n: r for r in rows}
    assert abs(by_n[4].mean - 1.595769) < 3 * by_n[4].std_error
    assert abs(by_n[100].mean - 7.978846) < 3 * by_n[100].std_error
    r16 = by_n[16]
    assert abs(r16.damped_mean - 1.595769) < 3 * r16.damped_std_error
    assert r16.damped_mean > 1.0            # does not vanish with n
    means = [by_n[n].mean for n in (4, 16, 100)]
    assert means[0] < means[1] < means[2]
