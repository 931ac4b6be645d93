import math

import numpy as np
import pytest

from defaultable import (AtomMeasure, InfeasibleError, ModelCoefficients, ThetaField,
                         TimeGrid, admissible_interval, intensity_sweep, make_foc,
                         merton_ratio, policy_full_info, solve_after_default,
                         solve_full_info, solve_general, solve_partial_info)


def _bisect_oracle(g, lo, hi, iters=200):
    # independent bracketing bisection on a decreasing function
    a, b = lo, hi
    assert g(a) > 0 > g(b)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if g(mid) > 0:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


def test_merton_ratio_when_no_jump_terms():
    assert solve_full_info(0.07, 0.02, 0.25, 0.0, 0.9) == merton_ratio(0.07, 0.02, 0.25)
    assert np.isclose(merton_ratio(0.07, 0.02, 0.25), 0.8)


def test_zero_crossing_where_intensity_kills_excess_return():
    # rho = 0 and lambda = -mu/kappa make the total expected return vanish
    pi = solve_full_info(0.08, 0.0, 0.3, -0.5, 0.16)
    assert abs(pi) < 1e-14


def test_closed_form_agrees_with_independent_bisection():
    mu, rho, sigma, kappa, lam = 0.08, 0.02, 0.3, -0.5, 0.1
    pi = solve_full_info(mu, rho, sigma, kappa, lam)

    def g(x):
        return mu - rho - sigma ** 2 * x + kappa * lam / (1.0 + kappa * x)

    oracle = _bisect_oracle(g, -1.0, 1.9)
    assert abs(pi - oracle) < 1e-10


def test_closed_form_merton_limit_is_continuous():
    mu, rho, sigma, lam = 0.09, 0.01, 0.35, 0.4
    target = merton_ratio(mu, rho, sigma)
    prev_gap = None
    for kappa in (-0.5, -0.05, -0.005, -5e-5, -5e-8):
        gap = abs(solve_full_info(mu, rho, sigma, kappa, lam) - target)
        if prev_gap is not None:
            assert gap < prev_gap
        prev_gap = gap
    assert prev_gap < 1e-6


def test_branch_margin_always_holds_on_random_sweep():
    rng = np.random.default_rng(60)
    for _ in range(200):
        mu = rng.uniform(-0.1, 0.2)
        rho = rng.uniform(0.0, 0.05)
        sigma = rng.uniform(0.05, 0.6)
        kappa = rng.uniform(-0.95, 0.95)
        lam = rng.uniform(0.0, 1.0)
        if kappa == 0.0:
            continue
        pi = solve_full_info(mu, rho, sigma, kappa, lam)
        assert 1.0 + kappa * pi > 0.0
        g = mu - rho - sigma ** 2 * pi + kappa * lam / (1.0 + kappa * pi)
        scale = max(abs(mu - rho), sigma ** 2 * abs(pi), 1e-12)
        assert abs(g) <= 1e-11 * max(scale, 1.0)


def test_general_solver_no_excess_return_gives_zero():
    foc = make_foc(0.05, 0.05, 0.3, 0.0, 0.0)
    res = solve_general(foc)
    assert res.status == "interior" and res.pi == 0.0


def test_general_solver_matches_dense_scan_with_jump_charge():
    nu = AtomMeasure(((1.0, 1.0),))
    theta = ThetaField("constant", 0.3)
    foc = make_foc(0.04, 0.0, 0.25, 0.0, 0.0, theta, nu)
    res = solve_general(foc)
    assert res.status == "interior"
    grid = np.arange(-2.0, 3.0, 1e-6)
    g = 0.04 - 0.0625 * grid - grid * 0.09 / (1.0 + grid * 0.3)
    scan = grid[np.argmin(np.abs(g))]
    assert abs(res.pi - scan) < 2e-6
    assert abs(res.residual) < 1e-10


def test_default_charge_shrinks_the_position():
    nu = AtomMeasure(((1.0, 1.0),))
    theta = ThetaField("constant", 0.3)
    base = solve_general(make_foc(0.04, 0.0, 0.25, 0.0, 0.0, theta, nu)).pi
    with_default = solve_general(make_foc(0.04, 0.0, 0.25, -0.5, 0.2, theta, nu)).pi
    assert with_default < base


def test_no_interior_root_reported_not_clamped():
    # short position capped by a positive loss slope: the unconstrained root
    # -2.5 sits outside the admissible interval, so no clamping happens
    res = solve_general(make_foc(0.0, 0.1, 0.2, 0.9, 0.0))
    assert res.status == "boundary_supremum" and res.pi is None
    assert res.boundary == "lower"
    # widening the interval (smaller slope) recovers the interior root
    res2 = solve_general(make_foc(0.0, 0.1, 0.2, 0.2, 0.0))
    assert res2.status == "interior"
    assert np.isclose(res2.pi, -2.5, atol=1e-9)
    # constant negative residual on a bounded interval: supremum at the boundary
    from defaultable.control import FirstOrderCondition
    flat = FirstOrderCondition(drift_excess=-0.05, sigma2=0.0, interval=(-1.0, 1.0))
    out = solve_general(flat)
    assert out.status == "boundary_supremum" and out.pi is None


def test_partial_info_deterministic_collapse_to_full_info():
    mu, rho, sigma, kappa, lam = 0.08, 0.02, 0.3, -0.5, 0.1
    interval = admissible_interval(kappa)
    pi = solve_partial_info(mu - rho + kappa * lam, (mu - rho) * kappa - sigma ** 2,
                            sigma ** 2 * kappa, interval)
    assert abs(pi - solve_full_info(mu, rho, sigma, kappa, lam)) < 1e-10


def test_partial_info_linear_degeneracy():
    # vanishing leading moment: unique linear root
    pi = solve_partial_info(0.03, -0.09, 0.0, (-5.0, 5.0))
    assert np.isclose(pi, 0.03 / 0.09)


def test_partial_info_posterior_mean_replaces_intensity():
    mu, rho, sigma, kappa = 0.08, 0.02, 0.3, -0.5
    lam_bar = 0.5 * 0.1 + 0.5 * 0.9
    interval = admissible_interval(kappa)
    pi = solve_partial_info(mu - rho + kappa * lam_bar, (mu - rho) * kappa - sigma ** 2,
                            sigma ** 2 * kappa, interval)
    grid = np.arange(max(interval[0], -3.0) + 1e-9, min(interval[1], 3.0), 1e-6)
    g = mu - rho - sigma ** 2 * grid + kappa * lam_bar / (1.0 + kappa * grid)
    scan = grid[np.argmin(np.abs(g))]
    assert abs(pi - scan) < 2e-6


def test_partial_info_infeasible_roots_raise():
    with pytest.raises(InfeasibleError):
        solve_partial_info(0.5, 0.0, 0.0, (-1.0, 1.0))


def test_after_default_regimes():
    # flat recovery regime: post-default optimum is zero
    pre, post = solve_after_default(0.08, 0.3, 0.02, 0.2, -0.4, 0.1, rho=0.02)
    assert post == 0.0 and pre > 0.0
    # theta = 0 pre-default: regime-1 root equals the closed form
    pre2, _ = solve_after_default(0.09, 0.3, 0.03, 0.2, -0.4, 0.15, rho=0.01)
    assert abs(pre2 - solve_full_info(0.09, 0.01, 0.3, -0.4, 0.15)) < 1e-9
    # identical vol, higher pre-default drift, no jump terms: ordered optima
    a, b = solve_after_default(0.08, 0.25, 0.03, 0.25, 0.0, 0.0, rho=0.0)
    assert a > b


def test_sweep_shapes_and_anchors():
    mu_o, sigma, kappa = 0.08, 0.3, -0.5
    lams = np.linspace(0.0, 0.32, 33)
    unc = np.array([p.pi for p in intensity_sweep(mu_o, sigma, kappa, lams)])
    comp = np.array([p.pi for p in intensity_sweep(mu_o, sigma, kappa, lams, "compensated")])
    assert np.all(np.diff(unc) < 0)
    assert np.all(np.diff(comp) < 0)
    assert abs(unc[0] - comp[0]) < 1e-12                  # models coincide at zero
    assert np.all(comp[1:] > unc[1:])
    at = np.argmin(np.abs(lams - 0.16))                   # -mu_o/kappa
    assert abs(unc[at]) < 1e-10


def test_method_agreement_where_preconditions_overlap():
    mu, rho, sigma, kappa, lam = 0.06, 0.01, 0.22, -0.35, 0.25
    closed = solve_full_info(mu, rho, sigma, kappa, lam)
    general = solve_general(make_foc(mu, rho, sigma, kappa, lam)).pi
    quad = solve_partial_info(mu - rho + kappa * lam, (mu - rho) * kappa - sigma ** 2,
                              sigma ** 2 * kappa, admissible_interval(kappa))
    assert abs(closed - general) < 1e-8
    assert abs(closed - quad) < 1e-8


def test_policy_full_info_on_time_varying_drift():
    grid = TimeGrid(1.0, 8)
    coeffs = ModelCoefficients(rho=0.0, mu=lambda t: 0.05 + 0.02 * t, sigma=0.2,
                               kappa=-0.4)
    policy = policy_full_info(coeffs, 0.1, grid)
    assert policy.method == "closed_form_full"
    assert policy.values.shape == (8,)
    assert np.all(np.abs(policy.residuals) < 1e-12)
    assert np.all(np.diff(policy.values) > 0)             # drift rises, position grows


def test_residual_is_strictly_decreasing_on_random_draws():
    rng = np.random.default_rng(61)
    nu = AtomMeasure(((1.0, 0.7), (-0.4, 1.2)))
    for _ in range(50):
        theta = ThetaField("linear", rng.uniform(-0.6, 0.9))
        foc = make_foc(rng.uniform(-0.1, 0.2), rng.uniform(0, 0.05),
                       rng.uniform(0.05, 0.5), rng.uniform(-0.9, 0.9),
                       rng.uniform(0, 0.8), theta, nu)
        lo = max(foc.interval[0], -4.0) + 1e-6
        hi = min(foc.interval[1], 4.0) - 1e-6
        pis = np.linspace(lo, hi, 25)
        vals = [foc.residual(p) for p in pis]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_admissible_interval_combines_slopes():
    nu = AtomMeasure(((1.0, 1.0), (-0.5, 1.0)))
    theta = ThetaField("linear", 1.0)
    lo, hi = admissible_interval(-0.4, theta, nu)
    assert math.isclose(lo, -1.0, rel_tol=1e-6)           # from theta(z) = -0.5
    assert math.isclose(hi, 2.0, rel_tol=1e-6)            # from theta(z) = 1 .. wait kappa
    # kappa = -0.4 caps at 2.5; theta(1) = 1 caps below at -1; theta(-0.5) caps at 2
    assert hi < 2.0 + 1e-6
