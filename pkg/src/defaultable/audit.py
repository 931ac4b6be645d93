"""Statistical audits of local optimality.

The criterion process M accumulates, up to the stopping node, the optimality
drift (excess return minus the variance and jump-risk charges), the forward
Wiener sum of the volatility, the compensated mark sum of theta/(1 + pi
theta) and the pathwise default sum of kappa/(1 + kappa pi).  A candidate
portfolio is locally optimal exactly when the conditional increments of M
vanish under the tilted measure whose density is proportional to
U'(X(T)) X(T); for log utility the tilt is identically one.

The audits here estimate those conditional increments by bucketing on the
investor's observable state (z-scores with a Bonferroni correction),
estimate directional derivatives and concavity with common random numbers,
recover the state-dependent hazard rates of the anticipating window trigger,
and measure conditional Wiener drift under enlarged observation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractViolation
from .flows import InformationFlow
from .market import (ModelCoefficients, PortfolioProcess, StoppingRule, apply_stopping,
                     evaluate_asset, log_wealth_given_tau)
from .paths import ScenarioEnsemble


# ---------------------------------------------------------------------------
# criterion process
# ---------------------------------------------------------------------------

@dataclass
class CriterionProcess:
    m_values: np.ndarray          # (p, n+1) cumulative criterion process
    f_raw: np.ndarray             # (p,) un-normalized tilt U'(X_T) X_T
    tau_nodes: np.ndarray         # (p,)
    terminal_wealth: np.ndarray   # (p,)
    grid: object

    @property
    def f_weights(self) -> np.ndarray:
        """Tilt normalized to unit sample mean (exactly, by construction)."""
        return self.f_raw / self.f_raw.mean()


def _as_rows(values, n: int) -> np.ndarray:
    """Normalize a scalar / (n,) / (rows, n) candidate to a (rows, n) array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full((1, n), float(arr))
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise ConfigError(f"need one value per cell, got {arr.shape}", "audit")
        return arr[None, :]
    if arr.ndim == 2 and arr.shape[1] == n:
        return arr
    raise ConfigError(f"bad shape {arr.shape}", "audit")


def _theta_quadratures(pi_vals, tcoef, theta, levy, m):
    """Per-cell (jump-risk charge, compensator rate) for the criterion drift.

    Values are cached per distinct (pi, theta-coefficient) pair, so constant
    or regime-switching inputs cost a handful of quadratures.
    """
    shape = np.broadcast(pi_vals, tcoef).shape
    pi_b = np.broadcast_to(pi_vals, shape)
    tc_b = np.broadcast_to(tcoef, shape)
    pairs = np.stack([pi_b.ravel(), tc_b.ravel()], axis=1)
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    if len(uniq) > 10000:
        raise ConfigError(
            "criterion drift needs one jump quadrature per distinct (pi, theta) pair; "
            f"{len(uniq)} distinct pairs is too many - use a constant or node-indexed "
            "policy with regime-wise theta", "audit")
    qa_u = np.empty(len(uniq))
    qb_u = np.empty(len(uniq))
    for j, (pi, coef) in enumerate(uniq):
        fn = theta.fn_for_coef(coef)
        qa_u[j] = levy.integrate(lambda z: pi * fn(z) ** 2 / (1.0 + pi * fn(z)), m)
        qb_u[j] = levy.integrate(lambda z: fn(z) / (1.0 + pi * fn(z)), m)
    return qa_u[inverse].reshape(shape), qb_u[inverse].reshape(shape)


def build_criterion(pi: PortfolioProcess, coeffs: ModelCoefficients, ens: ScenarioEnsemble,
                    stop: StoppingRule, utility, x0: float = 1.0) -> CriterionProcess:
    """Assemble the criterion process and the tilt weights on one ensemble."""
    if pi.certificate is None:
        raise ContractViolation("portfolio has no admissibility certificate")
    grid = ens.grid
    n, dt = grid.n_steps, grid.dt
    s1 = evaluate_asset(coeffs, ens).s1 if stop.needs_asset else None
    tau = apply_stopping(stop, ens, s1)
    a = coeffs.arrays(grid, ens)
    pv = np.broadcast_to(pi.values, (ens.n_paths, n))
    active = np.arange(n)[None, :] < tau[:, None]

    drift = (a["mu"] - a["rho"] - pv * a["sigma"] ** 2) * dt
    dm = drift + a["sigma"] * ens.wiener
    if not coeffs.theta.is_zero and coeffs.levy is not None:
        qa, qb = _theta_quadratures(pv, a["theta_coef"], coeffs.theta, coeffs.levy,
                                    coeffs.truncation_index)
        dm = dm - (qa + qb) * dt
        mz = ens.mark_z[:, :n]
        marked = np.isfinite(mz)
        th = np.where(marked, coeffs.theta.at(np.nan_to_num(mz), a["theta_coef"]), 0.0)
        dm = dm + np.where(marked, th / (1.0 + pv * th), 0.0)
    dm = dm + np.where(ens.default_flags, a["kappa"] / (1.0 + a["kappa"] * pv), 0.0)
    dm = dm * active

    m_values = np.zeros((ens.n_paths, n + 1))
    np.cumsum(dm, axis=1, out=m_values[:, 1:])

    x_t = x0 * np.exp(log_wealth_given_tau(pi.values, coeffs, ens, tau)[:, -1])
    f_raw = utility.marginal(x_t) * x_t
    return CriterionProcess(m_values=m_values, f_raw=f_raw, tau_nodes=tau,
                            terminal_wealth=x_t, grid=grid)


# ---------------------------------------------------------------------------
# martingale-property test
# ---------------------------------------------------------------------------

@dataclass
class BucketStat:
    t: float
    h: float
    bucket: int
    n: int
    mean: float
    std_error: float
    z: float
    conclusive: bool


@dataclass
class MartingaleAudit:
    rows: list
    significance: float
    z_critical: float
    max_abs_z: float
    verdict: str            # "pass" | "fail" | "inconclusive"
    drift_sign: int         # sign of the most significant bucket mean (0 if pass)
    n_tests: int


class MartingaleAccumulator:
    """Streams batches of criterion increments into per-bucket statistics.

    Statistics are reduced in arrival order with either plain or compensated
    summation, so a fixed batch partition yields identical results however
    the batches were produced.
    """

    def __init__(self, times: Sequence[tuple[float, float]], n_buckets: int,
                 compensated: bool = False):
        self.times = [(float(t), float(h)) for t, h in times]
        self.n_buckets = n_buckets
        self._stats = [np.zeros((3, n_buckets)) for _ in self.times]
        self._f_sum = 0.0
        self._n = 0
        self._kernel = (K.bucket_stats_compensated if compensated else K.bucket_stats)

    def add(self, crit: CriterionProcess, bucket_ids: Sequence[np.ndarray]):
        """bucket_ids: one int64 (p,) array per (t, h) pair, -1 to skip."""
        grid = crit.grid
        for j, (t, h) in enumerate(self.times):
            it, ih = grid.node_index(t), grid.node_index(t + h)
            vals = crit.f_raw * (crit.m_values[:, ih] - crit.m_values[:, it])
            sums, sumsq, counts = self._kernel(np.asarray(bucket_ids[j], dtype=np.int64),
                                               vals, self.n_buckets)
            self._stats[j][0] += sums
            self._stats[j][1] += sumsq
            self._stats[j][2] += counts
        self._f_sum += float(crit.f_raw.sum())
        self._n += crit.f_raw.shape[0]

    def finish(self, significance: float = 0.01, min_bucket: int = 100) -> MartingaleAudit:
        c = self._f_sum / max(self._n, 1)   # global tilt normalization
        rows = []
        for (t, h), stats in zip(self.times, self._stats):
            sums, sumsq, counts = stats
            for b in range(self.n_buckets):
                nb = int(counts[b])
                if nb == 0:
                    continue
                mean = sums[b] / nb / c
                if nb > 1:
                    var = max(sumsq[b] / (c * c) - nb * mean * mean, 0.0) / (nb - 1)
                    se = math.sqrt(var / nb)
                else:
                    se = math.inf
                conclusive = nb >= min_bucket and math.isfinite(se)
                if se == 0.0:
                    z = 0.0 if mean == 0.0 else math.inf
                else:
                    z = mean / se if math.isfinite(se) else 0.0
                rows.append(BucketStat(t, h, b, nb, float(mean), float(se), float(z),
                                       bool(conclusive)))
        tested = [r for r in rows if r.conclusive]
        n_tests = len(tested)
        if n_tests == 0:
            return MartingaleAudit(rows, significance, math.nan, math.nan,
                                   "inconclusive", 0, 0)
        z_crit = NormalDist().inv_cdf(1.0 - significance / (2.0 * n_tests))
        worst = max(tested, key=lambda r: abs(r.z))
        verdict = "fail" if abs(worst.z) > z_crit else "pass"
        sign = int(np.sign(worst.mean)) if verdict == "fail" else 0
        return MartingaleAudit(rows, significance, float(z_crit), float(abs(worst.z)),
                               verdict, sign, n_tests)


def default_bucketer(flow: InformationFlow, ens: ScenarioEnsemble, node: int,
                     tau_nodes: np.ndarray) -> tuple[np.ndarray, int]:
    """Survival indicator crossed with the sign of observable W (4 buckets).

    Falls back to the survival indicator alone when W is not observed.
    """
    arrays = flow.state_arrays(ens)
    alive = (tau_nodes > node).astype(np.int64)
    if "W" in arrays:
        wsign = (arrays["W"][:, node] > 0.0).astype(np.int64)
        return alive * 2 + wsign, 4
    return alive, 2


def martingale_test(crit: CriterionProcess, ens: ScenarioEnsemble, flow: InformationFlow,
                    times: Sequence[tuple[float, float]], significance: float = 0.01,
                    min_bucket: int = 100, compensated: bool = False,
                    bucketer: Callable | None = None, n_buckets: int | None = None) -> MartingaleAudit:
    """Single-ensemble audit of the conditional increments of the criterion.

    ``bucketer(ens, node, tau_nodes) -> int ids`` partitions paths by their
    observable state at the left time of each tested increment; the default
    crosses survival with the sign of W.
    """
    if bucketer is None:
        bucketer = lambda e, node, tau: default_bucketer(flow, e, node, tau)[0]
        n_buckets = default_bucketer(flow, ens, 0, crit.tau_nodes)[1]
    if n_buckets is None:
        raise ConfigError("n_buckets required with a custom bucketer", "audit")
    acc = MartingaleAccumulator(times, n_buckets, compensated)
    ids = [np.asarray(bucketer(ens, crit.grid.node_index(t), crit.tau_nodes), dtype=np.int64)
           for t, _h in acc.times]
    acc.add(crit, ids)
    return acc.finish(significance, min_bucket)


# ---------------------------------------------------------------------------
# perturbations: directional derivative and concavity
# ---------------------------------------------------------------------------

def perturbation_values(pi_values, beta_values, y: float, coeffs: ModelCoefficients,
                        ens: ScenarioEnsemble, tau_nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-path directional derivative of log-wealth and its y-derivative.

    Returns (psi, psi_y); psi_y collects the strictly non-positive quadratic
    charges (Wiener, realized marks, realized defaults) and is negative on
    every path where beta loads on a cell with positive volatility.
    """
    grid = ens.grid
    n, dt = grid.n_steps, grid.dt
    a = coeffs.arrays(grid, ens)
    active = np.arange(n)[None, :] < tau_nodes[:, None]
    beta = _as_rows(beta_values, n)
    shifted = np.asarray(pi_values, dtype=float) + y * beta

    drift = beta * (a["mu"] - a["rho"] - shifted * a["sigma"] ** 2) * dt
    psi = (drift + beta * a["sigma"] * ens.wiener) * active
    psi_y = -(beta ** 2) * a["sigma"] ** 2 * dt * active

    if not coeffs.theta.is_zero and coeffs.levy is not None:
        pre_c, post_c = coeffs.theta.regime_coefs()
        m1 = {c: coeffs.levy.integrate(coeffs.theta.fn_for_coef(c), coeffs.truncation_index)
              for c in {pre_c, post_c}}
        tcoef = a["theta_coef"]
        mean_jump = np.vectorize(m1.get, otypes=[float])(tcoef) if len(m1) > 1 else m1[pre_c]
        psi = psi - beta * mean_jump * dt * active
        mz = ens.mark_z[:, :n]
        marked = np.isfinite(mz)
        th = np.where(marked, coeffs.theta.at(np.nan_to_num(mz), tcoef), 0.0)
        denom = 1.0 + shifted * th
        psi = psi + np.where(marked & active, beta * th / denom, 0.0)
        psi_y = psi_y - np.where(marked & active, (beta * th / denom) ** 2, 0.0)
    denom_k = 1.0 + a["kappa"] * shifted
    psi = psi + np.where(ens.default_flags & active, beta * a["kappa"] / denom_k, 0.0)
    psi_y = psi_y - np.where(ens.default_flags & active,
                             (beta * a["kappa"] / denom_k) ** 2, 0.0)
    return psi.sum(axis=1), psi_y.sum(axis=1)


def perturbation_delta(pi_values, beta_values, coeffs: ModelCoefficients,
                       ens: ScenarioEnsemble, margin: float = 1e-3) -> float:
    """Largest |y| keeping the margins 1 + (pi + y beta) v >= margin for every
    loss slope v (kappa and theta over the jump support), on every cell."""
    grid = ens.grid
    n = grid.n_steps
    a = coeffs.arrays(grid, ens)
    beta = _as_rows(beta_values, n)
    base = np.asarray(pi_values, dtype=float)
    slopes = [a["kappa"]]
    if not coeffs.theta.is_zero and coeffs.levy is not None:
        zs = coeffs.levy.support_points(coeffs.truncation_index)
        slopes.extend(coeffs.theta.at(z, a["theta_coef"]) for z in zs)
    delta = math.inf
    for v in slopes:
        num = 1.0 + base * v - margin          # must stay > |y| * |beta * v|
        den = np.abs(beta * v)
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = np.where(den > 0.0, num / den, math.inf)
        if np.any(num <= 0.0):
            return 0.0
        delta = min(delta, float(np.min(bound)))
    return delta


@dataclass
class DerivativeCheck:
    finite_difference: float
    chain_value: float
    chain_std_error: float
    paired_std_error: float
    consistent: bool


def derivative_consistency(pi: PortfolioProcess, beta_values, utility,
                           coeffs: ModelCoefficients, ens: ScenarioEnsemble,
                           stop: StoppingRule, x0: float = 1.0,
                           dy: float = 1e-3) -> DerivativeCheck:
    """Central finite difference of E[U(X)] in the direction beta versus the
    Monte Carlo mean of U'(X) X psi(0), on common random numbers."""
    s1 = evaluate_asset(coeffs, ens).s1 if stop.needs_asset else None
    tau = apply_stopping(stop, ens, s1)
    delta = perturbation_delta(pi.values, beta_values, coeffs, ens)
    if dy >= delta:
        raise ConfigError(f"dy={dy} exceeds the admissible half-width {delta:.3g}", "audit.dy")
    beta = np.asarray(beta_values, dtype=float)

    def terminal(y):
        vals = pi.values + y * beta
        return x0 * np.exp(log_wealth_given_tau(vals, coeffs, ens, tau)[:, -1])

    x_plus, x_minus, x_base = terminal(dy), terminal(-dy), terminal(0.0)
    fd = (utility.u(x_plus) - utility.u(x_minus)) / (2.0 * dy)
    psi, _ = perturbation_values(pi.values, beta, 0.0, coeffs, ens, tau)
    chain = utility.marginal(x_base) * x_base * psi
    p = fd.shape[0]
    chain_se = float(np.std(chain, ddof=1) / math.sqrt(p))
    diff = fd - chain
    paired_se = float(np.std(diff, ddof=1) / math.sqrt(p))
    consistent = abs(float(np.mean(diff))) <= 3.0 * max(chain_se, paired_se)
    return DerivativeCheck(float(np.mean(fd)), float(np.mean(chain)), chain_se,
                           paired_se, bool(consistent))


@dataclass
class ConcavityReport:
    y_grid: np.ndarray
    objective: np.ndarray           # E[U(X_{pi + y beta})]
    objective_se: np.ndarray
    second_differences: np.ndarray  # at interior y points, CRN-paired
    second_diff_se: np.ndarray
    direct_curvature: np.ndarray    # analytic two-summand estimate at interior y
    psi_y_max: float                # largest per-path psi_y observed (should be < 0)
    classifier_ok: bool             # risk-aversion gate of the utility
    all_concave: bool


def concavity_audit(pi: PortfolioProcess, beta_values, y_grid, utility,
                    coeffs: ModelCoefficients, ens: ScenarioEnsemble, stop: StoppingRule,
                    x0: float = 1.0) -> ConcavityReport:
    """Curvature of y -> E[U(X_{pi + y beta})] with common random numbers.

    Reports CRN-paired central second differences, the analytic curvature
    (the tilt-weighted squared derivative plus the tilt-weighted psi_y), the
    sign of the per-path psi_y charges, and whether the utility passes the
    risk-aversion gate that guarantees concavity.
    """
    y_grid = np.asarray(sorted(float(y) for y in y_grid))
    delta = perturbation_delta(pi.values, beta_values, coeffs, ens)
    if y_grid.size and max(abs(y_grid[0]), abs(y_grid[-1])) >= delta:
        raise ConfigError(f"y grid exceeds admissible half-width {delta:.3g}", "audit.y_grid")
    s1 = evaluate_asset(coeffs, ens).s1 if stop.needs_asset else None
    tau = apply_stopping(stop, ens, s1)
    beta = np.asarray(beta_values, dtype=float)
    p = ens.n_paths

    u_paths = []
    for y in y_grid:
        vals = pi.values + y * beta
        x_t = x0 * np.exp(log_wealth_given_tau(vals, coeffs, ens, tau)[:, -1])
        u_paths.append(utility.u(x_t))
    u_paths = np.array(u_paths)                     # (n_y, p)
    objective = u_paths.mean(axis=1)
    objective_se = u_paths.std(axis=1, ddof=1) / math.sqrt(p)

    second, second_se, direct = [], [], []
    psi_y_max = -math.inf
    for j in range(1, y_grid.size - 1):
        hl = y_grid[j] - y_grid[j - 1]
        hr = y_grid[j + 1] - y_grid[j]
        if not math.isclose(hl, hr, rel_tol=1e-9):
            raise ConfigError("y grid must be uniform", "audit.y_grid")
        d2 = (u_paths[j + 1] - 2.0 * u_paths[j] + u_paths[j - 1]) / (hl * hr)
        second.append(float(d2.mean()))
        second_se.append(float(d2.std(ddof=1) / math.sqrt(p)))
        y = float(y_grid[j])
        vals = pi.values + y * beta
        x_t = x0 * np.exp(log_wealth_given_tau(vals, coeffs, ens, tau)[:, -1])
        psi, psi_y = perturbation_values(pi.values, beta, y, coeffs, ens, tau)
        psi_y_max = max(psi_y_max, float(psi_y.max()))
        summand1 = x_t * psi ** 2 * (utility.second(x_t) * x_t + utility.marginal(x_t))
        summand2 = utility.marginal(x_t) * x_t * psi_y
        direct.append(float((summand1 + summand2).mean()))
    second = np.asarray(second)
    second_se = np.asarray(second_se)
    all_concave = bool(np.all(second <= 3.0 * second_se))
    return ConcavityReport(y_grid=y_grid, objective=objective, objective_se=objective_se,
                           second_differences=second, second_diff_se=second_se,
                           direct_curvature=np.asarray(direct), psi_y_max=psi_y_max,
                           classifier_ok=bool(utility.risk_aversion_at_least_one),
                           all_concave=all_concave)


@dataclass
class UniquenessReport:
    y_grid: np.ndarray
    derivative: np.ndarray
    derivative_se: np.ndarray
    monotone_decreasing: bool
    crossings: int
    contradiction: bool      # two statistically separated roots


def uniqueness_probe(pi1_values, pi2_values, utility, coeffs: ModelCoefficients,
                     ens: ScenarioEnsemble, stop: StoppingRule, x0: float = 1.0,
                     n_points: int = 11) -> UniquenessReport:
    """Directional derivative of the objective along the segment pi1 -> pi2.

    Concavity makes the derivative strictly decreasing, so it can vanish at
    most once; two sign changes whose confidence intervals exclude zero flag
    a contradiction.  Degenerate segments (pi2 = pi1) report a zero curve.
    """
    s1 = evaluate_asset(coeffs, ens).s1 if stop.needs_asset else None
    tau = apply_stopping(stop, ens, s1)
    beta = np.asarray(pi2_values, dtype=float) - np.asarray(pi1_values, dtype=float)
    y_grid = np.linspace(0.0, 1.0, n_points)
    deriv = np.empty(n_points)
    deriv_se = np.empty(n_points)
    p = ens.n_paths
    for j, y in enumerate(y_grid):
        vals = np.asarray(pi1_values, dtype=float) + y * beta
        x_t = x0 * np.exp(log_wealth_given_tau(vals, coeffs, ens, tau)[:, -1])
        psi, _ = perturbation_values(pi1_values, beta, float(y), coeffs, ens, tau)
        g = utility.marginal(x_t) * x_t * psi
        deriv[j] = g.mean()
        deriv_se[j] = g.std(ddof=1) / math.sqrt(p)
    diffs = np.diff(deriv)
    monotone = bool(np.all(diffs <= 3.0 * np.sqrt(deriv_se[1:] ** 2 + deriv_se[:-1] ** 2)))
    signs = np.where(deriv > 3.0 * deriv_se, 1, np.where(deriv < -3.0 * deriv_se, -1, 0))
    nz = signs[signs != 0]
    crossings = int(np.sum(np.abs(np.diff(nz)) == 2)) if nz.size else 0
    return UniquenessReport(y_grid=y_grid, derivative=deriv, derivative_se=deriv_se,
                            monotone_decreasing=monotone, crossings=crossings,
                            contradiction=crossings > 1)


# ---------------------------------------------------------------------------
# conditional-expectation estimation
# ---------------------------------------------------------------------------

@dataclass
class ConditionalFit:
    method: str
    cv_error: float
    fallback_used: bool
    _predict: Callable = field(repr=False, default=None)

    def predict(self, states) -> np.ndarray:
        return self._predict(np.asarray(states, dtype=float))


def _bucket_fit(values, states, n_buckets):
    if np.allclose(states, np.round(states)) and np.unique(states).size <= n_buckets:
        levels = np.unique(states)
        edges = None
    else:
        qs = np.linspace(0.0, 1.0, n_buckets + 1)[1:-1]
        edges = np.quantile(states, qs)
        levels = None
    if levels is not None:
        ids = np.searchsorted(levels, states)
        nb = levels.size
    else:
        ids = np.searchsorted(edges, states)
        nb = edges.size + 1
    sums, _sq, counts = K.bucket_stats(ids.astype(np.int64), values, nb)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    overall = float(values.mean())
    means = np.where(np.isnan(means), overall, means)

    def predict(s):
        j = np.searchsorted(levels, s) if levels is not None else np.searchsorted(edges, s)
        return means[np.clip(j, 0, nb - 1)]

    return predict


def estimate_conditional(values, states, method: str = "bucket", n_buckets: int = 10,
                         degree: int = 2, folds: int = 5) -> ConditionalFit:
    """Fit E[value | state] by bucket means or least-squares polynomial.

    Cross-validated mean squared error uses a deterministic index-stride
    split.  A rank-deficient polynomial design falls back to the bucket
    method with a warning.
    """
    values = np.asarray(values, dtype=float)
    states = np.asarray(states, dtype=float)
    if states.ndim != 1 or values.shape != states.shape:
        raise ConfigError("values and states must be matching 1-d arrays", "audit.conditional")
    fallback = False
    if method == "polynomial":
        design = np.vander(states, degree + 1, increasing=True)
        if np.linalg.matrix_rank(design) < degree + 1:
            warnings.warn("rank-deficient polynomial design; falling back to buckets")
            method, fallback = "bucket", True
    if method == "polynomial":
        def fitter(v, s):
            coef, *_ = np.linalg.lstsq(np.vander(s, degree + 1, increasing=True), v, rcond=None)
            return lambda grid: (np.vander(np.atleast_1d(np.asarray(grid, dtype=float)),
                                           degree + 1, increasing=True) @ coef)
    elif method == "bucket":
        def fitter(v, s):
            return _bucket_fit(v, s, n_buckets)
    else:
        raise ConfigError(f"unknown method '{method}'", "audit.conditional")

    predict = fitter(values, states)
    # deterministic k-fold by index stride
    errs = []
    idx = np.arange(values.size)
    for f in range(folds):
        test = idx % folds == f
        if test.all() or (~test).sum() < 2:
            continue
        fit_f = fitter(values[~test], states[~test])
        pred = fit_f(states[test])
        errs.append(float(np.mean((values[test] - pred) ** 2)))
    cv = float(np.mean(errs)) if errs else math.nan
    return ConditionalFit(method=method, cv_error=cv, fallback_used=fallback, _predict=predict)


# ---------------------------------------------------------------------------
# window-trigger hazard rates
# ---------------------------------------------------------------------------

@dataclass
class HazardStateEstimate:
    state: int
    n_obs: int
    poisson_rate: float
    poisson_se: float
    poisson_target: float
    default_rate: float
    default_se: float
    default_target: float
    conclusive: bool


@dataclass
class WindowHazardReport:
    gamma: float
    epsilon: float
    dt: float
    states: list


def compensator_estimate(ens: ScenarioEnsemble, min_obs: int = 1000) -> WindowHazardReport:
    """State-conditional hazard rates under the anticipating window trigger.

    At each surviving node with a full look-back, the state is the event
    count of the trailing window (t - eps, t]: state 1 means one event there
    (survival then forbids a new Poisson event for the next eps, while the
    default hazard jumps to the full event rate gamma), state 0 means none
    AND none in (t - 2 eps, t - eps] either, which is the configuration the
    closed-form rates gamma/(1 + gamma eps) and gamma^2 eps/(1 + gamma eps)
    describe.  An empty trailing window with an event in (t - 2 eps,
    t - eps] is reported as the separate "blocked" state 2: there survival
    already reveals that no event can arrive while the old event stays in
    pair reach, so the closed forms do not apply (the Poisson rate is near
    zero).  Estimates carry an O(dt/eps) grid bias.
    """
    mech = ens.mechanism
    if mech is None or mech.kind != "n_window_trigger":
        raise ConfigError("ensemble was not generated with the window trigger", "audit")
    grid = ens.grid
    n, dt = grid.n_steps, grid.dt
    k = mech.window_steps(grid)
    gamma = ens.levy.mass(ens.truncation_index) if ens.levy is not None else 0.0
    eps = float(mech.epsilon)

    flags = ens.mark_flags(include_pad=True).astype(np.int64)
    cum = np.zeros((ens.n_paths, flags.shape[1] + 1), dtype=np.int64)
    np.cumsum(flags, axis=1, out=cum[:, 1:])
    nodes = np.arange(2 * k, n)                    # full look-back reach and a next cell
    trail = cum[:, nodes] - cum[:, nodes - k]      # events in (t - eps, t]
    deep = cum[:, nodes - k] - cum[:, nodes - 2 * k]   # events in (t - 2 eps, t - eps]
    event_n = flags[:, nodes] > 0                  # event in (t, t + dt]
    d_cell = ens.first_default_cell()
    alive = (d_cell[:, None] < 0) | (nodes[None, :] <= d_cell[:, None])
    event_h = nodes[None, :] == d_cell[:, None]

    states = np.where(trail >= 1, 1, np.where(deep >= 1, 2, 0)).astype(np.int64)
    valid = alive & (trail <= 1)
    obs_n, hits_n = K.hazard_scan(states, np.ascontiguousarray(event_n), valid, 3)
    obs_h, hits_h = K.hazard_scan(states, np.ascontiguousarray(event_h), valid, 3)

    targets_n = [gamma / (1.0 + gamma * eps), 0.0, math.nan]
    targets_h = [gamma * gamma * eps / (1.0 + gamma * eps), gamma, math.nan]
    out = []
    for s in range(3):
        n_obs = int(obs_n[s])
        if n_obs == 0:
            out.append(HazardStateEstimate(s, 0, math.nan, math.nan, targets_n[s],
                                           math.nan, math.nan, targets_h[s], False))
            continue
        p_n = hits_n[s] / n_obs
        p_h = hits_h[s] / n_obs
        se_n = math.sqrt(max(p_n * (1.0 - p_n), 0.0) / n_obs) / dt
        se_h = math.sqrt(max(p_h * (1.0 - p_h), 0.0) / n_obs) / dt
        out.append(HazardStateEstimate(s, n_obs, p_n / dt, se_n, targets_n[s],
                                       p_h / dt, se_h, targets_h[s], n_obs >= min_obs))
    return WindowHazardReport(gamma=float(gamma), epsilon=eps, dt=dt, states=out)


# ---------------------------------------------------------------------------
# conditional Wiener drift under enlarged observation
# ---------------------------------------------------------------------------

@dataclass
class DriftBucket:
    bucket: int
    n: int
    drift: float
    std_error: float


def semimartingale_drift(ens: ScenarioEnsemble, state_ids: np.ndarray,
                         n_buckets: int, compensated: bool = False) -> list[DriftBucket]:
    """Mean Wiener increment per dt, bucketed by a per-cell observable state.

    ``state_ids`` is int64 (p, n) with -1 excluding a cell.  Observation
    flows that only contain the Wiener history report drift zero up to
    noise; a flow peeking at the sign of a future increment shows the
    folded-normal drift of matching sign.
    """
    n = ens.n_steps
    if state_ids.shape != ens.wiener.shape:
        raise ConfigError("state_ids must match the increment array", "audit.drift")
    kern = K.bucket_stats_compensated if compensated else K.bucket_stats
    sums, sumsq, counts = kern(state_ids.ravel().astype(np.int64),
                               np.ascontiguousarray(ens.wiener.ravel()), n_buckets)
    dt = ens.grid.dt
    out = []
    for b in range(n_buckets):
        nb = int(counts[b])
        if nb == 0:
            out.append(DriftBucket(b, 0, math.nan, math.nan))
            continue
        mean = sums[b] / nb
        var = max(sumsq[b] - nb * mean * mean, 0.0) / max(nb - 1, 1)
        out.append(DriftBucket(b, nb, float(mean / dt), float(math.sqrt(var / nb) / dt)))
    return out
