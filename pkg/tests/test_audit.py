import math

import numpy as np
import pytest

from defaultable import (AtomMeasure, LogUtility, ExponentialUtility, ModelCoefficients,
                         PowerUtility, StoppingRule, ThetaField, TimeGrid,
                         anticipating_information, build_criterion, compensator_estimate,
                         concavity_audit, derivative_consistency, estimate_conditional,
                         evaluate_wealth, full_information, independent_intensity,
                         make_foc, make_portfolio, martingale_test, n_window_trigger,
                         partial_information, perturbation_delta, perturbation_values,
                         risk_aversion_margin,
                         satisfies_risk_aversion_bound, semimartingale_drift,
                         simulate_ensemble, solve_full_info, solve_general,
                         uniqueness_probe)

MU, RHO, SIGMA, KAPPA, LAM = 0.08, 0.0, 0.3, -0.5, 0.1


@pytest.fixture(scope="module")
def setting():
    grid = TimeGrid(1.0, 100)
    ens = simulate_ensemble(grid, 20000, 71, mechanism=independent_intensity(LAM))
    coeffs = ModelCoefficients(rho=RHO, mu=MU, sigma=SIGMA, kappa=KAPPA)
    pi_star = solve_full_info(MU, RHO, SIGMA, KAPPA, LAM)
    return grid, ens, coeffs, pi_star


def test_log_utility_tilt_is_identically_one(setting):
    grid, ens, coeffs, pi_star = setting
    pi = make_portfolio(pi_star, coeffs, full_information(), ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("first_default"), LogUtility())
    assert np.allclose(crit.f_raw, 1.0)
    assert np.isclose(crit.f_weights.mean(), 1.0)
    assert np.all(crit.m_values[:, 0] == 0.0)
    # the criterion freezes at the stopping node
    stopped = crit.tau_nodes < grid.n_steps
    assert stopped.any()
    for row in np.nonzero(stopped)[0][:20]:
        m = crit.tau_nodes[row]
        assert np.all(crit.m_values[row, m:] == crit.m_values[row, m])


def test_criterion_vanishes_in_the_empty_market():
    grid = TimeGrid(1.0, 50)
    ens = simulate_ensemble(grid, 100, 72)
    coeffs = ModelCoefficients(rho=0.02, mu=0.02, sigma=0.0)
    pi = make_portfolio(0.7, coeffs, full_information(), ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("horizon_only"), LogUtility())
    assert np.all(crit.m_values == 0.0)


def test_power_utility_tilt_equals_inverse_wealth(setting):
    grid, ens, coeffs, pi_star = setting
    pi = make_portfolio(pi_star, coeffs, full_information(), ens)
    stop = StoppingRule("first_default")
    crit = build_criterion(pi, coeffs, ens, stop, PowerUtility(c=2.0))
    x_t = evaluate_wealth(pi, coeffs, ens, stop).terminal
    assert np.allclose(crit.f_raw, 1.0 / x_t)           # u'(x) x = x^{-1} for c = 2
    assert np.isclose(crit.f_weights.mean(), 1.0)


def test_criterion_mean_zero_at_optimum_with_jump_charge():
    grid = TimeGrid(1.0, 100)
    nu = AtomMeasure(((1.0, 1.0),))
    theta = ThetaField("constant", 0.3)
    coeffs = ModelCoefficients(rho=0.0, mu=0.05, sigma=0.25, kappa=-0.4,
                               theta=theta, levy=nu)
    pi_star = solve_general(make_foc(0.05, 0.0, 0.25, -0.4, 0.2, theta, nu)).pi
    ens = simulate_ensemble(grid, 20000, 73, levy=nu,
                            mechanism=independent_intensity(0.2))
    pi = make_portfolio(pi_star, coeffs, full_information(), ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("first_default"), LogUtility())
    m_t = crit.m_values[:, -1]
    assert abs(m_t.mean()) < 3.0 * m_t.std(ddof=1) / math.sqrt(m_t.size)


def test_martingale_audit_passes_at_optimum(setting):
    grid, ens, coeffs, pi_star = setting
    pi = make_portfolio(pi_star, coeffs, full_information(), ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("first_default"), LogUtility())
    audit = martingale_test(crit, ens, full_information(), [(0.2, 0.2), (0.5, 0.25)])
    assert audit.verdict == "pass"
    assert audit.n_tests > 0


@pytest.mark.parametrize("shift", [0.2, -0.2])
def test_martingale_audit_detects_shift_with_predicted_sign(setting, shift):
    grid, ens, coeffs, pi_star = setting
    pi = make_portfolio(pi_star + shift, coeffs, full_information(), ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("first_default"), LogUtility())
    audit = martingale_test(crit, ens, full_information(), [(0.2, 0.2), (0.5, 0.25)])
    assert audit.verdict == "fail"
    # the residual is strictly decreasing: a positive shift drifts negative
    assert audit.drift_sign == (-1 if shift > 0 else 1)


def test_martingale_audit_trivial_market_passes():
    grid = TimeGrid(1.0, 50)
    ens = simulate_ensemble(grid, 2000, 74)
    coeffs = ModelCoefficients(rho=0.03, mu=0.03, sigma=0.0)
    pi = make_portfolio(0.4, coeffs, full_information(), ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("horizon_only"), LogUtility())
    audit = martingale_test(crit, ens, full_information(), [(0.2, 0.2)])
    assert audit.verdict == "pass"
    assert audit.max_abs_z == 0.0


def test_default_bucketer_falls_back_without_observed_w(setting):
    from defaultable.audit import default_bucketer
    grid, ens, coeffs, pi_star = setting
    flow = partial_information(["H"])
    pi = make_portfolio(0.2, coeffs, flow, ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("first_default"), LogUtility())
    ids, nb = default_bucketer(flow, ens, grid.node_index(0.5), crit.tau_nodes)
    assert nb == 2
    assert set(np.unique(ids)) <= {0, 1}


def test_martingale_audit_undersized_buckets_inconclusive(setting):
    grid, ens, coeffs, pi_star = setting
    pi = make_portfolio(pi_star, coeffs, full_information(), ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("first_default"), LogUtility())
    audit = martingale_test(crit, ens, full_information(), [(0.2, 0.2)],
                            min_bucket=10 ** 9)
    assert audit.verdict == "inconclusive"


def test_accumulator_batches_agree_with_single_shot(setting):
    from defaultable import MartingaleAccumulator
    from defaultable.audit import default_bucketer
    grid, ens, coeffs, pi_star = setting
    flow = full_information()
    pi = make_portfolio(pi_star, coeffs, flow, ens)
    crit = build_criterion(pi, coeffs, ens, StoppingRule("first_default"), LogUtility())
    times = [(0.2, 0.2)]
    one = MartingaleAccumulator(times, 4)
    ids = [default_bucketer(flow, ens, grid.node_index(0.2), crit.tau_nodes)[0]]
    one.add(crit, ids)
    a = one.finish()

    # same data pushed in two halves
    import copy
    half = MartingaleAccumulator(times, 4)
    for sl in (slice(0, 10000), slice(10000, None)):
        sub = copy.copy(crit)
        sub.m_values = crit.m_values[sl]
        sub.f_raw = crit.f_raw[sl]
        half.add(sub, [ids[0][sl]])
    b = half.finish()
    for ra, rb in zip(a.rows, b.rows):
        assert ra.n == rb.n
        assert np.isclose(ra.mean, rb.mean, rtol=1e-10, atol=1e-14)


def test_psi_y_is_negative_wherever_beta_loads_volatility(setting):
    grid, ens, coeffs, pi_star = setting
    tau = np.full(ens.n_paths, grid.n_steps, dtype=np.int64)
    beta = np.ones(grid.n_steps)
    _psi, psi_y = perturbation_values(pi_star, beta, 0.0, coeffs, ens, tau)
    assert np.all(psi_y < 0.0)
    _psi2, psi_y2 = perturbation_values(pi_star, np.zeros(grid.n_steps), 0.0,
                                        coeffs, ens, tau)
    assert np.all(psi_y2 == 0.0)


def test_derivative_chain_matches_finite_difference(setting):
    grid, ens, coeffs, pi_star = setting
    pi = make_portfolio(pi_star, coeffs, full_information(), ens)
    beta = np.ones(grid.n_steps)
    for utility in (LogUtility(), PowerUtility(c=2.0)):
        check = derivative_consistency(pi, beta, utility, coeffs, ens,
                                       StoppingRule("first_default"))
        assert check.consistent
        # at the optimum the log-utility directional derivative is ~0
        if isinstance(utility, LogUtility):
            assert abs(check.chain_value) < 4.0 * check.chain_std_error


def test_concavity_in_the_plain_diffusion_setting():
    grid = TimeGrid(1.0, 64)
    ens = simulate_ensemble(grid, 10000, 75)
    coeffs = ModelCoefficients(rho=0.0, mu=0.06, sigma=0.25)
    pi0 = 0.06 / 0.0625
    pi = make_portfolio(pi0, coeffs, full_information(), ens)
    beta = np.ones(64)
    y = np.linspace(-0.3, 0.3, 7)
    rep = concavity_audit(pi, beta, y, LogUtility(), coeffs, ens,
                          StoppingRule("horizon_only"))
    assert rep.classifier_ok
    assert rep.all_concave
    assert rep.psi_y_max < 0.0
    # log utility: curvature at the middle point is -E[int beta^2 sigma^2 dt]
    # (deterministic per path here, so allow a roundoff floor on top of 3 se)
    mid = len(rep.second_differences) // 2
    target = -(0.25 ** 2) * 1.0
    assert abs(rep.second_differences[mid] - target) < 3.0 * rep.second_diff_se[mid] + 1e-11
    assert np.allclose(rep.direct_curvature[mid], target, rtol=1e-9)


def test_concavity_for_power_and_classifier_rejects_exponential(setting):
    grid, ens, coeffs, pi_star = setting
    pi = make_portfolio(pi_star, coeffs, full_information(), ens)
    beta = np.ones(grid.n_steps)
    y = np.linspace(-0.2, 0.2, 5)
    rep = concavity_audit(pi, beta, y, PowerUtility(c=2.0), coeffs, ens,
                          StoppingRule("first_default"))
    assert rep.classifier_ok and rep.all_concave
    assert not ExponentialUtility(gamma=1.0).risk_aversion_at_least_one
    assert not satisfies_risk_aversion_bound(ExponentialUtility(gamma=1.0))
    assert satisfies_risk_aversion_bound(LogUtility())
    assert satisfies_risk_aversion_bound(PowerUtility(c=2.0))
    assert not satisfies_risk_aversion_bound(PowerUtility(c=0.5))
    assert np.all(risk_aversion_margin(LogUtility(), np.array([0.5, 1.0, 2.0])) == 0.0)


def test_perturbation_delta_caps_the_grid(setting):
    grid, ens, coeffs, pi_star = setting
    beta = np.ones(grid.n_steps)
    delta = perturbation_delta(pi_star, beta, coeffs, ens)
    # margins: 1 + (pi + y beta) kappa >= 1e-3 -> y <= (1 + pi kappa - 1e-3)/|kappa|
    expected = (1.0 + pi_star * KAPPA - 1e-3) / abs(KAPPA)
    assert np.isclose(delta, expected, rtol=1e-9)
    pi = make_portfolio(pi_star, coeffs, full_information(), ens)
    from defaultable import ConfigError
    with pytest.raises(ConfigError):
        concavity_audit(pi, beta, np.linspace(-2 * delta, 2 * delta, 5), LogUtility(),
                        coeffs, ens, StoppingRule("first_default"))


def test_uniqueness_probe_degenerate_and_single_crossing(setting):
    grid, ens, coeffs, pi_star = setting
    stop = StoppingRule("first_default")
    rep0 = uniqueness_probe(np.full(grid.n_steps, pi_star),
                            np.full(grid.n_steps, pi_star), LogUtility(), coeffs, ens,
                            stop)
    assert np.all(rep0.derivative == 0.0)
    assert rep0.crossings == 0 and not rep0.contradiction

    lo = np.full(grid.n_steps, pi_star - 0.15)
    hi = np.full(grid.n_steps, pi_star + 0.3)
    rep = uniqueness_probe(lo, hi, LogUtility(), coeffs, ens, stop)
    assert rep.monotone_decreasing
    assert rep.crossings == 1 and not rep.contradiction
    assert rep.derivative[0] > 0 > rep.derivative[-1]


def test_uniqueness_probe_on_two_noisy_solver_outputs(setting):
    # two optima computed from independently estimated intensities land close
    # to each other: no statistically separated pair of roots appears
    grid, ens, coeffs, pi_star = setting
    rng = np.random.default_rng(82)
    candidates = []
    for _ in range(2):
        lam_hat = rng.poisson(LAM * 400) / 400.0       # noisy intensity estimate
        candidates.append(solve_full_info(MU, RHO, SIGMA, KAPPA, lam_hat))
    rep = uniqueness_probe(np.full(grid.n_steps, candidates[0]),
                           np.full(grid.n_steps, candidates[1]), LogUtility(), coeffs,
                           ens, StoppingRule("first_default"))
    assert not rep.contradiction
    assert rep.crossings <= 1


def _two_state_ensemble(grid, n_paths, lam_lo, lam_hi, p_lo, seed):
    # per-path hidden intensity: two sub-ensembles stacked (stratified prior)
    n_lo = int(round(n_paths * p_lo))
    a = simulate_ensemble(grid, n_lo, seed, mechanism=independent_intensity(lam_lo))
    b = simulate_ensemble(grid, n_paths - n_lo, seed + 1,
                          mechanism=independent_intensity(lam_hi))
    a.wiener = np.vstack([a.wiener, b.wiener])
    a.mark_z = np.vstack([a.mark_z, b.mark_z])
    a.default_flags = np.vstack([a.default_flags, b.default_flags])
    return a


def test_partial_information_optimum_passes_its_own_audit():
    # hidden two-state intensity, observable default count; the per-node
    # optimum uses the Bayes posterior mean, and the criterion's conditional
    # increments vanish per count bucket; freezing the posterior at its prior
    # value breaks the audit in the informative buckets
    from defaultable import admissible_interval, solve_partial_info
    mu, rho, sigma, kappa = 0.08, 0.0, 0.3, -0.5
    lam_lo, lam_hi, p_lo = 0.1, 0.9, 0.5
    grid = TimeGrid(1.0, 100)
    ens = _two_state_ensemble(grid, 30000, lam_lo, lam_hi, p_lo, 94)
    coeffs = ModelCoefficients(rho=rho, mu=mu, sigma=sigma, kappa=kappa)
    flow = partial_information(["H"])
    interval = admissible_interval(kappa)

    def posterior(counts, t):
        w_lo = p_lo * np.exp(-lam_lo * t) * np.power(lam_lo * t, counts)
        w_hi = (1 - p_lo) * np.exp(-lam_hi * t) * np.power(lam_hi * t, counts)
        return (w_lo * lam_lo + w_hi * lam_hi) / (w_lo + w_hi)

    def pi_for(lam_bar):
        return solve_partial_info(mu - rho + kappa * lam_bar,
                                  (mu - rho) * kappa - sigma ** 2,
                                  sigma ** 2 * kappa, interval)

    def policy(state, node):
        t = max(node * grid.dt, 1e-12)
        counts = state[:, 0]
        out = np.empty(counts.shape[0])
        for c in np.unique(counts):
            out[counts == c] = pi_for(float(posterior(c, t)))
        return out

    stop = StoppingRule("horizon_only")
    times = [(0.3, 0.2), (0.6, 0.2)]

    def bucketer(e, node, tau):
        counts = flow.state_arrays(e)["H"][:, node]
        return np.minimum(counts, 2).astype(np.int64)

    pi = make_portfolio(policy, coeffs, flow, ens)
    assert pi.certificate.adaptedness_verified
    crit = build_criterion(pi, coeffs, ens, stop, LogUtility())
    audit = martingale_test(crit, ens, flow, times, bucketer=bucketer, n_buckets=3)
    assert audit.verdict == "pass"

    frozen = make_portfolio(pi_for(p_lo * lam_lo + (1 - p_lo) * lam_hi), coeffs,
                            flow, ens)
    crit2 = build_criterion(frozen, coeffs, ens, stop, LogUtility())
    audit2 = martingale_test(crit2, ens, flow, times, bucketer=bucketer, n_buckets=3)
    assert audit2.verdict == "fail"


def test_estimate_conditional_constant_and_identity():
    rng = np.random.default_rng(76)
    states = rng.uniform(0, 1, 4000)
    const = 2.0 + 0.02 * rng.standard_normal(4000)
    fit = estimate_conditional(const, states, method="bucket", n_buckets=8)
    assert np.allclose(fit.predict(np.linspace(0.1, 0.9, 5)), 2.0, atol=0.01)
    ident = estimate_conditional(states, states, method="polynomial", degree=2)
    grid_s = np.linspace(0.1, 0.9, 9)
    assert np.allclose(ident.predict(grid_s), grid_s, atol=1e-3)
    assert ident.cv_error < 1e-6


def test_estimate_conditional_rank_deficient_falls_back():
    values = np.array([1.0, 2.0, 1.5, 1.7, 2.2, 0.9])
    states = np.zeros(6)                       # constant state: degree-2 fit is singular
    with pytest.warns(UserWarning):
        fit = estimate_conditional(values, states, method="polynomial", degree=2)
    assert fit.fallback_used and fit.method == "bucket"
    assert np.isclose(fit.predict([0.0])[0], values.mean())


def test_estimate_conditional_recovers_two_state_posterior():
    rng = np.random.default_rng(77)
    lo, hi, p_lo, t = 0.1, 0.9, 0.5, 1.0
    lam = np.where(rng.uniform(size=60000) < p_lo, lo, hi)
    counts = rng.poisson(lam * t)
    fit = estimate_conditional(lam, counts.astype(float), method="bucket", n_buckets=12)
    for c in (0, 1, 2):
        w_lo = p_lo * math.exp(-lo * t) * (lo * t) ** c
        w_hi = (1 - p_lo) * math.exp(-hi * t) * (hi * t) ** c
        bayes = (w_lo * lo + w_hi * hi) / (w_lo + w_hi)
        n_c = int((counts == c).sum())
        se = float(lam[counts == c].std(ddof=1) / math.sqrt(n_c))
        assert abs(fit.predict([float(c)])[0] - bayes) < max(3 * se, 0.01)


def test_window_hazard_estimates_sharpen_as_window_shrinks():
    gamma = 1.0
    nu = AtomMeasure(((1.0, gamma),))
    grid = TimeGrid(2.0, 400)                  # dt = 0.005
    results = []
    for eps in (0.1, 0.05, 0.025):
        ens = simulate_ensemble(grid, 3000, 78, levy=nu,
                                mechanism=n_window_trigger(eps))
        rep = compensator_estimate(ens)
        st0 = rep.states[0]
        assert st0.conclusive
        assert abs(st0.poisson_rate - st0.poisson_target) < 3.0 * st0.poisson_se
        results.append((st0.poisson_rate, st0.poisson_target))
    targets = [t for _r, t in results]
    assert targets[0] < targets[1] < targets[2] < gamma    # gamma/(1+gamma*eps) -> gamma
    assert results[0][0] < results[2][0]


def test_semimartingale_drift_zero_without_lookahead():
    grid = TimeGrid(1.0, 100)
    ens = simulate_ensemble(grid, 2000, 79)
    ids = np.zeros_like(ens.wiener, dtype=np.int64)        # a single bucket
    out = semimartingale_drift(ens, ids, 1)
    assert abs(out[0].drift) < 3.0 * out[0].std_error


def test_semimartingale_drift_zero_when_extra_information_is_independent():
    nu = AtomMeasure(((1.0, 1.0),))
    grid = TimeGrid(2.0, 200)
    ens = simulate_ensemble(grid, 3000, 80, levy=nu, mechanism=n_window_trigger(0.1))
    # bucket by the default indicator at the cell's left node: H is driven by
    # the Poisson events only, so the Wiener drift stays zero per bucket
    h = np.zeros((ens.n_paths, grid.n_steps), dtype=np.int64)
    cum = np.cumsum(ens.default_flags, axis=1)
    h[:, 1:] = (cum[:, :-1] >= 1).astype(np.int64)
    out = semimartingale_drift(ens, h, 2)
    for row in out:
        if row.n > 50:
            assert abs(row.drift) < 3.5 * row.std_error


def test_semimartingale_drift_sees_future_sign_lookahead():
    grid = TimeGrid(1.0, 100)
    k = 10                                     # eps = 0.1
    ens = simulate_ensemble(grid, 2000, 81)
    flow = anticipating_information(wiener_sign_steps=k)
    sign = flow.state_arrays(ens)["WSIGN"][:, : grid.n_steps]
    ids = sign.astype(np.int64)                # -1 marks the undefined right edge
    out = semimartingale_drift(ens, ids, 2)
    target = math.sqrt(2.0 / (math.pi * k * grid.dt))
    assert abs(out[1].drift - target) < 3.0 * out[1].std_error
    assert abs(out[0].drift + target) < 3.0 * out[0].std_error
