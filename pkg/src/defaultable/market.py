"""Bond, defaultable asset and wealth dynamics on simulated scenarios.

Wealth and the asset are evaluated from their closed product-exponential
solutions, so positivity is structural whenever the admissibility margins
hold; a plain Euler discretization of the same dynamics is provided as an
independent cross-check (``euler_asset`` / ``euler_wealth``) and is the one
expected to carry discretization error.

Coefficient processes are left-continuous grid processes: scalars, functions
of time, or pre/post-default regime pairs (switching on the left limit of the
default count).  The jump coefficient field theta(t, z) is zero, constant in
z, or linear in z, each optionally regime-switching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AdmissibilityError, ConfigError, ContractViolation, NumericOverflowError
from .flows import InformationFlow
from .grids import TimeGrid
from .levy import LevyMeasure
from .paths import ScenarioEnsemble


# ---------------------------------------------------------------------------
# coefficient specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimeSwitch:
    """Coefficient equal to ``pre`` before the first default, ``post`` after."""

    pre: float
    post: float


CoefficientSpec = float | Callable[[np.ndarray], np.ndarray] | RegimeSwitch


@dataclass(frozen=True)
class ThetaField:
    """Mark coefficient theta(t, z).

    kind "zero": theta = 0; "constant": theta = coef; "linear": theta = coef * z.
    ``coef`` may be a RegimeSwitch for pre/post-default values.
    """

    kind: str = "zero"
    coef: float | RegimeSwitch = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "linear"):
            raise ConfigError(f"unknown theta kind '{self.kind}'", "coefficients.theta")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def coef_values(self, post_mask: np.ndarray | None) -> np.ndarray:
        if isinstance(self.coef, RegimeSwitch):
            if post_mask is None:
                raise ConfigError("regime theta needs a scenario", "coefficients.theta")
            return np.where(post_mask, self.coef.post, self.coef.pre)
        return np.asarray(self.coef, dtype=float)

    def at(self, z, coef):
        """theta evaluated at mark size(s) z given the coefficient value(s)."""
        if self.kind == "zero":
            return np.zeros(np.broadcast(z, coef).shape)
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(coef, dtype=float), np.broadcast(z, coef).shape).copy()
        return np.asarray(coef, dtype=float) * np.asarray(z, dtype=float)

    def fn_for_coef(self, coef: float):
        """z -> theta(z) for one scalar coefficient value (for quadrature)."""
        if self.kind == "zero":
            return lambda z: np.zeros_like(np.asarray(z, dtype=float))
        if self.kind == "constant":
            return lambda z: np.full_like(np.asarray(z, dtype=float), float(coef))
        return lambda z: float(coef) * np.asarray(z, dtype=float)

    def regime_coefs(self) -> tuple[float, float]:
        if isinstance(self.coef, RegimeSwitch):
            return float(self.coef.pre), float(self.coef.post)
        return float(self.coef), float(self.coef)


def _materialize(spec: CoefficientSpec, grid: TimeGrid, post_mask: np.ndarray | None,
                 name: str, regime: str = "pre") -> np.ndarray:
    """Evaluate a coefficient spec on the cells' left nodes -> (1, n) or (p, n).

    Without a scenario (post_mask None) a regime pair evaluates to the
    requested regime's constant; with one, it switches on the left limit of
    the default count.
    """
    t_left = grid.nodes[:-1]
    if isinstance(spec, RegimeSwitch):
        if post_mask is None:
            value = spec.pre if regime == "pre" else spec.post
            return np.full((1, grid.n_steps), float(value))
        return np.where(post_mask, spec.post, spec.pre)
    if callable(spec):
        vals = np.asarray(spec(t_left), dtype=float) * np.ones_like(t_left)
        return vals[None, :]
    return np.full((1, grid.n_steps), float(spec))


@dataclass(frozen=True)
class ModelCoefficients:
    rho: CoefficientSpec = 0.0
    mu: CoefficientSpec = 0.0
    sigma: CoefficientSpec = 0.0
    kappa: CoefficientSpec = 0.0
    theta: ThetaField = field(default_factory=ThetaField)
    levy: LevyMeasure | None = None
    truncation_index: int = 1

    def arrays(self, grid: TimeGrid, ens: ScenarioEnsemble | None = None,
               regime: str = "pre") -> dict:
        """Coefficient values per cell, broadcastable against (p, n) arrays."""
        post_mask = None
        if ens is not None:
            cum = np.cumsum(ens.default_flags, axis=1)
            post_mask = np.zeros_like(ens.default_flags)
            post_mask[:, 1:] = cum[:, :-1] >= 1
        if not self.theta.is_zero:
            if post_mask is not None:
                tcoef = self.theta.coef_values(post_mask) * np.ones((1, grid.n_steps))
            else:
                pre_c, post_c = self.theta.regime_coefs()
                tcoef = np.full((1, grid.n_steps), pre_c if regime == "pre" else post_c)
        else:
            tcoef = np.zeros((1, grid.n_steps))
        out = {
            "rho": _materialize(self.rho, grid, post_mask, "rho", regime),
            "mu": _materialize(self.mu, grid, post_mask, "mu", regime),
            "sigma": _materialize(self.sigma, grid, post_mask, "sigma", regime),
            "kappa": _materialize(self.kappa, grid, post_mask, "kappa", regime),
            "theta_coef": tcoef,
            "post_mask": post_mask,
        }
        if np.any(out["sigma"] < 0.0):
            raise ConfigError("sigma must be >= 0", "coefficients.sigma")
        if np.any(out["kappa"] < -1.0):
            raise ConfigError("kappa must be >= -1", "coefficients.kappa")
        return out

    def theta_moment(self, power: int, regime_coef: float) -> float:
        """integral of theta(z)^power against the measure, one regime value."""
        if self.theta.is_zero or self.levy is None:
            return 0.0
        fn = self.theta.fn_for_coef(regime_coef)
        return self.levy.integrate(lambda z: fn(z) ** power, self.truncation_index)

    def validate(self, grid: TimeGrid):
        for regime in ("pre", "post"):
            arrs = self.arrays(grid, regime=regime)
            for name in ("rho", "mu", "sigma", "kappa"):
                if not np.all(np.isfinite(arrs[name])):
                    raise ConfigError(f"{name} not finite on the grid", f"coefficients.{name}")
        if not self.theta.is_zero:
            if self.levy is None:
                raise ConfigError("theta without a jump measure", "coefficients.theta")
            for coef in set(self.theta.regime_coefs()):
                fn = self.theta.fn_for_coef(coef)
                zs = self.levy.support_points(self.truncation_index)
                if zs.size and np.min(fn(zs)) <= -1.0:
                    raise ConfigError("theta must stay > -1 on the jump support",
                                      "coefficients.theta")


# ---------------------------------------------------------------------------
# asset evaluation
# ---------------------------------------------------------------------------

@dataclass
class AssetPaths:
    s0: np.ndarray        # (1 or p, n+1) bond
    s1: np.ndarray        # (p, n+1) defaultable asset, normalized to S1(0)=1
    grid: TimeGrid


def _first_bad_node(values: np.ndarray) -> int:
    bad = np.argwhere(~np.isfinite(values))
    return int(bad[0][1]) if bad.size else -1


def evaluate_asset(coeffs: ModelCoefficients, ens: ScenarioEnsemble,
                   s1_0: float = 1.0) -> AssetPaths:
    """Bond and asset paths from the closed product-exponential solution.

    The asset combines the default-jump product (which reaches zero exactly
    when a loss of -1 hits), the drift with its second-order correction, the
    left-point Wiener sum and the compensated mark terms collapsed to
    log(1 + theta) at marks minus the mean-jump drift.
    """
    grid = ens.grid
    n, dt = grid.n_steps, grid.dt
    a = coeffs.arrays(grid, ens)
    s0 = np.exp(np.concatenate([np.zeros((a["rho"].shape[0], 1)),
                                np.cumsum(a["rho"] * dt, axis=1)], axis=1))

    mz = ens.mark_z[:, :n]
    marked = np.isfinite(mz)
    tcoef = a["theta_coef"]
    exponent_rate = (a["mu"] - 0.5 * a["sigma"] ** 2) * dt + a["sigma"] * ens.wiener
    if not coeffs.theta.is_zero:
        pre_c, post_c = coeffs.theta.regime_coefs()
        m1 = {c: coeffs.theta_moment(1, c) for c in {pre_c, post_c}}
        mean_jump = np.vectorize(m1.get, otypes=[float])(tcoef) if len(m1) > 1 else m1[pre_c]
        exponent_rate = exponent_rate - mean_jump * dt
        theta_at_marks = np.where(marked, coeffs.theta.at(np.nan_to_num(mz), tcoef), 0.0)
        if np.any(theta_at_marks <= -1.0):
            raise ConfigError("theta reached -1 at a mark", "coefficients.theta")
        exponent_rate = exponent_rate + np.where(marked, np.log1p(theta_at_marks), 0.0)

    log_core = np.zeros((ens.n_paths, n + 1))
    np.cumsum(exponent_rate, axis=1, out=log_core[:, 1:])
    if not np.all(np.isfinite(log_core)):
        raise NumericOverflowError("asset exponent", _first_bad_node(log_core))

    jump_factor = np.ones((ens.n_paths, n + 1))
    kappa_dh = 1.0 + a["kappa"] * ens.default_flags
    np.cumprod(kappa_dh, axis=1, out=jump_factor[:, 1:])
    with np.errstate(over="ignore"):
        s1 = s1_0 * jump_factor * np.exp(log_core)
    if not np.all(np.isfinite(s1)):
        raise NumericOverflowError("asset value", _first_bad_node(s1))
    return AssetPaths(s0=s0, s1=s1, grid=grid)


def euler_asset(coeffs: ModelCoefficients, ens: ScenarioEnsemble, s1_0: float = 1.0) -> np.ndarray:
    """Left-point Euler discretization of the asset dynamics (cross-check)."""
    grid = ens.grid
    n, dt = grid.n_steps, grid.dt
    a = coeffs.arrays(grid, ens)
    mz = ens.mark_z[:, :n]
    marked = np.isfinite(mz)
    tcoef = a["theta_coef"]
    incr = a["mu"] * dt + a["sigma"] * ens.wiener + a["kappa"] * ens.default_flags
    if not coeffs.theta.is_zero:
        pre_c, post_c = coeffs.theta.regime_coefs()
        m1 = {c: coeffs.theta_moment(1, c) for c in {pre_c, post_c}}
        mean_jump = np.vectorize(m1.get, otypes=[float])(tcoef) if len(m1) > 1 else m1[pre_c]
        theta_at_marks = np.where(marked, coeffs.theta.at(np.nan_to_num(mz), tcoef), 0.0)
        incr = incr + theta_at_marks - mean_jump * dt
    out = np.empty((ens.n_paths, n + 1))
    out[:, 0] = s1_0
    np.cumprod(1.0 + incr, axis=1, out=out[:, 1:])
    out[:, 1:] *= s1_0
    return out


# ---------------------------------------------------------------------------
# stopping rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StoppingRule:
    """When investing in the risky asset stops.

    * ``first_default``: at the first default jump (or the horizon),
    * ``horizon_only``:  at the horizon, unless the asset value hits zero,
    * ``zero_value``:    at the first zero of the asset value (or horizon).
    """

    kind: str = "first_default"

    def __post_init__(self):
        if self.kind not in ("first_default", "horizon_only", "zero_value"):
            raise ConfigError(f"unknown stopping rule '{self.kind}'", "stopping.kind")

    @property
    def needs_asset(self) -> bool:
        return self.kind in ("horizon_only", "zero_value")


def apply_stopping(stop: StoppingRule, ens: ScenarioEnsemble,
                   s1: np.ndarray | None = None) -> np.ndarray:
    """Stopping node per path (node index in [0, n]); horizon when nothing fires."""
    n = ens.n_steps
    if stop.kind == "first_default":
        first = ens.first_default_cell()
        tau = np.where(first >= 0, first + 1, n)
        return np.minimum(tau, n).astype(np.int64)
    if s1 is None:
        raise ContractViolation(f"stopping rule '{stop.kind}' needs the asset path")
    dead = s1 <= 0.0
    any_dead = dead.any(axis=1)
    first_zero = np.argmax(dead, axis=1)
    tau = np.where(any_dead, first_zero, n)
    return np.minimum(tau, n).astype(np.int64)


# ---------------------------------------------------------------------------
# admissibility
# ---------------------------------------------------------------------------

@dataclass
class AdmissibilityCertificate:
    epsilon_pi: float
    items: dict
    adaptedness_verified: bool


@dataclass
class AdmissibilityReport:
    ok: bool
    certificate: AdmissibilityCertificate | None
    violations: list   # (item, message) pairs, first entry is the earliest failure


@dataclass
class PortfolioProcess:
    """Fraction of wealth in the risky asset, one value per grid cell."""

    values: np.ndarray                       # (1, n) or (p, n)
    flow: InformationFlow
    policy: Callable | None = None
    certificate: AdmissibilityCertificate | None = None

    @property
    def epsilon_pi(self) -> float | None:
        return None if self.certificate is None else self.certificate.epsilon_pi


def _pi_values(candidate, grid: TimeGrid, flow: InformationFlow,
               ens: ScenarioEnsemble | None):
    """Normalize a candidate (scalar, array or policy) to (rows, n) values."""
    n = grid.n_steps
    if callable(candidate):
        if ens is None:
            raise ConfigError("a policy candidate needs a scenario ensemble", "portfolio")
        arrays = flow.state_arrays(ens)
        cols = [np.column_stack([arrays[f][:, i] for f in flow.fields]) for i in range(n)]
        values = np.column_stack([np.asarray(candidate(c, i), dtype=float) * np.ones(ens.n_paths)
                                  for i, c in enumerate(cols)])
        return values, candidate
    vals = np.asarray(candidate, dtype=float)
    if vals.ndim == 0:
        return np.full((1, n), float(vals)), None
    if vals.ndim == 1:
        if vals.shape[0] != n:
            raise ConfigError(f"portfolio needs one value per cell, got {vals.shape}", "portfolio")
        return vals[None, :], None
    if vals.ndim == 2 and vals.shape[1] == n:
        return vals.copy(), None
    raise ConfigError(f"bad portfolio shape {vals.shape}", "portfolio")


def check_admissibility(candidate, coeffs: ModelCoefficients, flow: InformationFlow,
                        ens: ScenarioEnsemble, grid: TimeGrid | None = None) -> AdmissibilityReport:
    """Grid-level admissibility: margins against the default-loss and jump
    coefficients, finite moment sums, left-continuity (structural) and
    adaptedness (verified by recomputation when the candidate is a policy or
    a deterministic array; otherwise recorded as unverified).
    """
    grid = ens.grid if grid is None else grid
    dt = grid.dt
    values, policy = _pi_values(candidate, grid, flow, ens)
    a = coeffs.arrays(grid, ens)
    violations = []
    items = {}

    # (i) left-continuity is structural; adaptedness by recomputation
    deterministic = values.shape[0] == 1
    adapted_verified = deterministic or policy is not None
    if policy is not None:
        arrays = flow.state_arrays(ens)
        for i in range(grid.n_steps):
            state = np.column_stack([arrays[f][:, i] for f in flow.fields])
            again = np.asarray(policy(state, i), dtype=float) * np.ones(ens.n_paths)
            if not np.array_equal(again, values[:, i]):
                violations.append(("i", f"policy not reproducible from the observable state at node {i}"))
                adapted_verified = False
                break
    items["i_left_continuous_adapted"] = adapted_verified and not any(v[0] == "i" for v in violations)

    # (ii) margins against kappa and theta
    margin_kappa = 1.0 + values * a["kappa"]
    eps = float(np.min(margin_kappa))
    if eps <= 0.0:
        node = int(np.argwhere(margin_kappa <= 0.0)[0][1])
        pk = float((values * a["kappa"]).flat[np.argmin(margin_kappa)])
        violations.append(("ii", f"pi*kappa = {pk:.6g} <= -1 at node {node}"))
    if not coeffs.theta.is_zero and coeffs.levy is not None:
        zs = coeffs.levy.support_points(coeffs.truncation_index)
        tcoef = a["theta_coef"]
        for z in zs:
            margin = 1.0 + values * coeffs.theta.at(z, tcoef)
            m = float(np.min(margin))
            if m < eps:
                eps = m
            if m <= 0.0:
                node = int(np.argwhere(margin <= 0.0)[0][1])
                violations.append(("ii", f"pi*theta <= -1 at node {node}, mark z={z:.6g}"))
                break
    items["ii_margins"] = eps > 0.0

    # (iii) finite moment sums
    drift_sum = np.sum(np.abs(a["mu"] - a["rho"]) * np.abs(values) * dt, axis=1)
    var_sum = np.sum((a["sigma"] * values) ** 2 * dt, axis=1)
    theta_sq = 0.0
    if not coeffs.theta.is_zero:
        pre_c, post_c = coeffs.theta.regime_coefs()
        m2 = max(coeffs.theta_moment(2, pre_c), coeffs.theta_moment(2, post_c))
        theta_sq = np.sum(values ** 2 * m2 * dt, axis=1)
    finite = (np.all(np.isfinite(drift_sum)) and np.all(np.isfinite(var_sum))
              and np.all(np.isfinite(np.atleast_1d(theta_sq))))
    items["iii_moments_finite"] = bool(finite)
    if not finite:
        violations.append(("iii", "moment sums are not finite"))

    # (iv)/(v) integrand products stay finite on the grid
    prods_ok = bool(np.all(np.isfinite(values * a["sigma"])))
    items["iv_v_integrands_finite"] = prods_ok
    if not prods_ok:
        violations.append(("iv", "pi*sigma not finite"))

    ok = not violations
    cert = AdmissibilityCertificate(epsilon_pi=eps, items=items,
                                    adaptedness_verified=adapted_verified) if ok else None
    return AdmissibilityReport(ok=ok, certificate=cert, violations=violations)


def make_portfolio(candidate, coeffs: ModelCoefficients, flow: InformationFlow,
                   ens: ScenarioEnsemble) -> PortfolioProcess:
    """Check a candidate and attach its certificate; raise on any violation."""
    report = check_admissibility(candidate, coeffs, flow, ens)
    if not report.ok:
        item, msg = report.violations[0]
        raise AdmissibilityError(item, msg)
    values, policy = _pi_values(candidate, ens.grid, flow, ens)
    return PortfolioProcess(values=values, flow=flow, policy=policy if callable(candidate) else None,
                            certificate=report.certificate)


# ---------------------------------------------------------------------------
# wealth
# ---------------------------------------------------------------------------

@dataclass
class WealthPath:
    values: np.ndarray        # (p, n+1); all-bond after the stopping node
    terminal: np.ndarray      # (p,)
    tau_nodes: np.ndarray     # (p,)
    x0: float
    grid: TimeGrid


def _effective_pi(pi_values: np.ndarray, tau_nodes: np.ndarray, n: int,
                  n_paths: int) -> np.ndarray:
    active = np.arange(n)[None, :] < tau_nodes[:, None]
    return np.broadcast_to(pi_values, (n_paths, n)) * active


def log_wealth_given_tau(values_raw: np.ndarray, coeffs: ModelCoefficients,
                         ens: ScenarioEnsemble, tau_nodes: np.ndarray) -> np.ndarray:
    """log of the closed-form wealth with initial wealth 1, given stopping nodes.

    ``values_raw`` is (1, n) or (p, n); the risky fraction is zeroed from the
    stopping node on, which realizes the all-bond continuation.  Margins on
    realized events are asserted (the certificate machinery checks them over
    the whole support; this guards direct callers).
    """
    grid = ens.grid
    n, dt = grid.n_steps, grid.dt
    a = coeffs.arrays(grid, ens)
    pv = _effective_pi(values_raw, tau_nodes, n, ens.n_paths)

    rate = (a["rho"] + (a["mu"] - a["rho"]) * pv - 0.5 * (a["sigma"] * pv) ** 2) * dt
    rate = rate + a["sigma"] * pv * ens.wiener
    if not coeffs.theta.is_zero:
        pre_c, post_c = coeffs.theta.regime_coefs()
        m1 = {c: coeffs.theta_moment(1, c) for c in {pre_c, post_c}}
        tcoef = a["theta_coef"]
        mean_jump = np.vectorize(m1.get, otypes=[float])(tcoef) if len(m1) > 1 else m1[pre_c]
        rate = rate - pv * mean_jump * dt
        mz = ens.mark_z[:, :n]
        marked = np.isfinite(mz)
        theta_marks = np.where(marked, coeffs.theta.at(np.nan_to_num(mz), tcoef), 0.0)
        wealth_jump = pv * theta_marks
        if np.any(wealth_jump <= -1.0):
            raise AdmissibilityError("ii", "pi*theta reached -1 on a realized mark")
        rate = rate + np.where(marked, np.log1p(wealth_jump), 0.0)
    default_exposure = pv * a["kappa"] * ens.default_flags
    if np.any(default_exposure <= -1.0):
        raise AdmissibilityError("ii", "pi*kappa reached -1 on a realized default")
    rate = rate + np.where(ens.default_flags, np.log1p(default_exposure), 0.0)

    log_x = np.zeros((ens.n_paths, n + 1))
    np.cumsum(rate, axis=1, out=log_x[:, 1:])
    if not np.all(np.isfinite(log_x)):
        raise NumericOverflowError("wealth exponent", _first_bad_node(log_x))
    return log_x


def evaluate_wealth(pi: PortfolioProcess, coeffs: ModelCoefficients, ens: ScenarioEnsemble,
                    stop: StoppingRule, x0: float = 1.0) -> WealthPath:
    """Closed-form wealth along each path, stopped by ``stop``.

    After the stopping node everything sits in the bond, which the closed
    form realizes by zeroing the risky fraction from that node on; the
    terminal value is then the stopped wealth compounded at the short rate.
    Requires a certificate (see :func:`make_portfolio`).
    """
    if pi.certificate is None:
        raise ContractViolation("portfolio has no admissibility certificate")
    grid = ens.grid
    s1 = evaluate_asset(coeffs, ens).s1 if stop.needs_asset else None
    tau = apply_stopping(stop, ens, s1)
    with np.errstate(over="ignore"):
        values = x0 * np.exp(log_wealth_given_tau(pi.values, coeffs, ens, tau))
    if not np.all(np.isfinite(values)):
        raise NumericOverflowError("wealth value", _first_bad_node(values))
    return WealthPath(values=values, terminal=values[:, -1], tau_nodes=tau, x0=x0, grid=grid)


def euler_wealth(pi: PortfolioProcess, coeffs: ModelCoefficients, ens: ScenarioEnsemble,
                 stop: StoppingRule, x0: float = 1.0) -> np.ndarray:
    """Euler discretization of the wealth dynamics (independent cross-check)."""
    grid = ens.grid
    n, dt = grid.n_steps, grid.dt
    s1 = evaluate_asset(coeffs, ens).s1 if stop.needs_asset else None
    tau = apply_stopping(stop, ens, s1)
    a = coeffs.arrays(grid, ens)
    raw = pi.values if isinstance(pi, PortfolioProcess) else np.asarray(pi, dtype=float)
    if raw.ndim == 0:
        raw = np.full((1, n), float(raw))
    elif raw.ndim == 1:
        raw = raw[None, :]
    pv = _effective_pi(raw, tau, n, ens.n_paths)
    incr = (a["rho"] + (a["mu"] - a["rho"]) * pv) * dt + a["sigma"] * pv * ens.wiener
    if not coeffs.theta.is_zero:
        pre_c, post_c = coeffs.theta.regime_coefs()
        m1 = {c: coeffs.theta_moment(1, c) for c in {pre_c, post_c}}
        tcoef = a["theta_coef"]
        mean_jump = np.vectorize(m1.get, otypes=[float])(tcoef) if len(m1) > 1 else m1[pre_c]
        mz = ens.mark_z[:, :n]
        marked = np.isfinite(mz)
        theta_marks = np.where(marked, coeffs.theta.at(np.nan_to_num(mz), tcoef), 0.0)
        incr = incr + pv * theta_marks - pv * mean_jump * dt
    incr = incr + pv * a["kappa"] * ens.default_flags
    out = np.empty((ens.n_paths, n + 1))
    out[:, 0] = x0
    np.cumprod(1.0 + incr, axis=1, out=out[:, 1:])
    out[:, 1:] *= x0
    return out
