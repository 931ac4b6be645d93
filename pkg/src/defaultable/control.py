"""Locally optimal log-utility portfolios.

Everything reduces to the strictly decreasing per-node residual

    g(pi) = (mu - rho) - sigma^2 pi - J(pi) + kappa lambda / (1 + kappa pi),

where J(pi) integrates pi theta^2 / (1 + pi theta) against the jump measure.
Under full information with theta = 0 the root has a closed form (a quadratic
in pi; the branch violating the loss margin 1 + kappa pi > 0 is discarded).
Partial information leads to the same quadratic with coefficients replaced by
conditional moments of the observables.  The general case is solved by
bracketing bisection with a secant polish, which is also the independent
check for the closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InfeasibleError
from .levy import LevyMeasure
from .market import ModelCoefficients, ThetaField


# ---------------------------------------------------------------------------
# admissible interval and residual
# ---------------------------------------------------------------------------

_GUARD = 1e-9


def admissible_interval(kappa: float, theta: ThetaField | None = None,
                        levy: LevyMeasure | None = None, truncation_index: int = 1,
                        regime: str = "pre") -> tuple[float, float]:
    """Open interval of pi where 1 + pi*kappa > 0 and 1 + pi*theta(z) > 0
    for every z in the jump support, shrunk by a relative guard so the
    reciprocals stay bounded."""
    lo, hi = -math.inf, math.inf
    slopes = [float(kappa)] if kappa else []
    if theta is not None and not theta.is_zero and levy is not None:
        coef = theta.regime_coefs()[0 if regime == "pre" else 1]
        fn = theta.fn_for_coef(coef)
        zs = levy.support_points(truncation_index)
        slopes.extend(float(v) for v in np.atleast_1d(fn(zs)))
    for v in slopes:
        if v > 0.0:
            lo = max(lo, -1.0 / v)
        elif v < 0.0:
            hi = min(hi, -1.0 / v)
    if math.isfinite(lo):
        lo += max(abs(lo), 1.0) * _GUARD
    if math.isfinite(hi):
        hi -= max(abs(hi), 1.0) * _GUARD
    if not lo < hi:
        raise InfeasibleError("empty admissible interval for pi")
    return lo, hi


@dataclass
class FirstOrderCondition:
    """One node's optimality residual and its admissible domain."""

    drift_excess: float                    # mu - rho
    sigma2: float
    kappa: float = 0.0
    intensity: float = 0.0
    theta_integral: Callable[[float], float] | None = None   # pi -> J(pi)
    interval: tuple[float, float] = (-math.inf, math.inf)

    def residual(self, pi: float) -> float:
        g = self.drift_excess - self.sigma2 * pi
        if self.theta_integral is not None:
            g -= self.theta_integral(pi)
        if self.kappa != 0.0 and self.intensity != 0.0:
            g += self.kappa * self.intensity / (1.0 + self.kappa * pi)
        return g


def make_foc(mu: float, rho: float, sigma: float, kappa: float = 0.0,
             intensity: float = 0.0, theta: ThetaField | None = None,
             levy: LevyMeasure | None = None, truncation_index: int = 1,
             regime: str = "pre", include_default_term: bool = True) -> FirstOrderCondition:
    interval = admissible_interval(kappa if include_default_term else 0.0,
                                   theta, levy, truncation_index, regime)
    theta_integral = None
    if theta is not None and not theta.is_zero and levy is not None:
        coef = theta.regime_coefs()[0 if regime == "pre" else 1]
        fn = theta.fn_for_coef(coef)

        def theta_integral(pi: float, _fn=fn) -> float:
            return levy.integrate(lambda z: pi * _fn(z) ** 2 / (1.0 + pi * _fn(z)),
                                  truncation_index)

    return FirstOrderCondition(
        drift_excess=mu - rho, sigma2=sigma * sigma,
        kappa=kappa if include_default_term else 0.0,
        intensity=intensity if include_default_term else 0.0,
        theta_integral=theta_integral, interval=interval)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

@dataclass
class RootResult:
    pi: float | None
    residual: float | None
    status: str            # "interior" | "boundary_supremum" | "degenerate"
    boundary: str | None = None


def merton_ratio(mu: float, rho: float, sigma: float) -> float:
    if sigma <= 0.0:
        raise ConfigError("sigma must be > 0", "solver")
    return (mu - rho) / (sigma * sigma)


def solve_full_info(mu: float, rho: float, sigma: float, kappa: float,
                    intensity: float) -> float:
    """Closed-form root of g under full information with theta = 0.

    The quadratic (multiply g by 1 + kappa pi) has two roots; the printed
    branch is the one keeping 1 + kappa pi > 0, which is asserted.  The
    formula is rationalized so the kappa -> 0 limit reproduces the Merton
    ratio exactly instead of through a 0/0 cancellation.
    """
    if sigma <= 0.0:
        raise ConfigError("sigma must be > 0", "solver")
    if kappa == 0.0:
        return merton_ratio(mu, rho, sigma)
    s2 = sigma * sigma
    a = kappa * (mu - rho) / s2
    b = kappa * (mu - rho + intensity * kappa) / s2
    disc = (1.0 - a) ** 2 + 4.0 * b
    if disc < 0.0:
        raise RuntimeError("negative discriminant in the closed-form root; "
                           "the residual is monotone so this indicates bad inputs")
    s = math.sqrt(disc)
    if 1.0 - a >= 0.0:
        pi = 2.0 * (mu - rho + intensity * kappa) / s2 / (s + 1.0 - a)
    else:
        pi = (a - 1.0 + s) / (2.0 * kappa)
    if 1.0 + kappa * pi <= 0.0:
        raise RuntimeError(f"branch selection failed: 1 + kappa*pi = {1 + kappa * pi:.3g} <= 0")
    resid = (mu - rho) - s2 * pi + kappa * intensity / (1.0 + kappa * pi)
    scale = max(abs(mu - rho), s2 * abs(pi), abs(kappa * intensity / (1.0 + kappa * pi)), 1e-300)
    if abs(resid) > 1e-12 * scale:
        raise RuntimeError(f"closed-form residual {resid:.3e} exceeds 1e-12 relative")
    return pi


def solve_general(foc: FirstOrderCondition, tol: float = 1e-12,
                  max_iter: int = 200) -> RootResult:
    """Bracketing bisection plus secant polish on the decreasing residual.

    Reports a boundary supremum (no interior root) when the residual keeps
    one sign on the whole admissible interval; that outcome is never clamped
    to a boundary value.  A residual that is identically zero (no excess
    return, no variance, no default charge) is degenerate: every fraction is
    optimal and the all-bond convention pi = 0 is returned.
    """
    lo, hi = foc.interval
    probes = [x for x in (0.0, min(1.0, hi - 1e-6) if math.isfinite(hi) else 1.0,
                          max(-1.0, lo + 1e-6) if math.isfinite(lo) else -1.0)
              if lo < x < hi]
    if probes and all(foc.residual(x) == 0.0 for x in probes):
        if len(probes) >= 2:
            return RootResult(0.0, 0.0, "degenerate")
        return RootResult(probes[0], 0.0, "interior")

    def finite_probe(x, fallback):
        return x if math.isfinite(x) else fallback

    a = finite_probe(lo, None)
    b = finite_probe(hi, None)
    if a is None:
        a = min(-1.0, (b if b is not None else 0.0) - 1.0)
        while foc.residual(a) <= 0.0:
            a *= 2.0
            if abs(a) > 1e12:
                return RootResult(None, None, "boundary_supremum", "lower")
    if b is None:
        b = max(1.0, a + 1.0)
        while foc.residual(b) >= 0.0:
            b *= 2.0
            if abs(b) > 1e12:
                return RootResult(None, None, "boundary_supremum", "upper")
    ga, gb = foc.residual(a), foc.residual(b)
    if ga == 0.0:
        return RootResult(a, 0.0, "interior")
    if gb == 0.0:
        return RootResult(b, 0.0, "interior")
    if ga < 0.0 and gb < 0.0:
        return RootResult(None, None, "boundary_supremum", "lower")
    if ga > 0.0 and gb > 0.0:
        return RootResult(None, None, "boundary_supremum", "upper")
    if ga < 0.0 < gb:   # decreasing residual: positive side must be the left one
        a, b, ga, gb = b, a, gb, ga
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        gm = foc.residual(mid)
        if gm == 0.0 or abs(b - a) < tol * max(1.0, abs(mid)):
            a = b = mid
            break
        if gm > 0.0:
            a, ga = mid, gm
        else:
            b, gb = mid, gm
    pi = 0.5 * (a + b)
    # secant polish
    x0, x1 = a, b if b != a else a + tol
    f0, f1 = foc.residual(x0), foc.residual(x1)
    for _ in range(8):
        if f1 == f0:
            break
        x2 = x1 - f1 * (x1 - x0) / (f1 - f0)
        if not (foc.interval[0] <= x2 <= foc.interval[1]):
            break
        x0, f0, x1, f1 = x1, f1, x2, foc.residual(x2)
        if abs(f1) <= tol:
            break
    if abs(f1) <= abs(foc.residual(pi)):
        pi = x1
    return RootResult(float(pi), float(foc.residual(pi)), "interior")


def solve_partial_info(const_term: float, linear_term: float, quad_term: float,
                       interval: tuple[float, float] = (-math.inf, math.inf)) -> float:
    """Root of const + linear*pi - quad*pi^2 = 0 selected by the margin interval.

    The three coefficients are the conditional moments of (mu - rho + kappa
    lambda), ((mu - rho) kappa - sigma^2) and (sigma^2 kappa) given the
    investor's observables; with deterministic inputs the equation collapses
    to the full-information quadratic.  Degenerates to the linear root when
    the leading moment vanishes.
    """
    lo, hi = interval
    if quad_term == 0.0:
        if linear_term == 0.0:
            if const_term == 0.0:
                return 0.0
            raise InfeasibleError("no root: constant non-zero, no pi dependence")
        root = -const_term / linear_term
        if not lo < root < hi:
            raise InfeasibleError(f"linear root {root:.6g} outside the admissible interval")
        return root
    disc = linear_term * linear_term + 4.0 * quad_term * const_term
    if disc < 0.0:
        raise InfeasibleError("complex roots in the degree-2 optimality equation")
    sq = math.sqrt(disc)
    if linear_term >= 0.0:
        q0 = 0.5 * (linear_term + sq)
    else:
        q0 = 0.5 * (linear_term - sq)
    roots = []
    if q0 != 0.0:
        roots.append(q0 / quad_term)
        roots.append(-const_term / q0)
    else:
        roots.append(0.0)
    inside = sorted(set(r for r in roots if lo < r < hi))
    if not inside:
        raise InfeasibleError(f"both roots {roots} violate the admissible interval")
    if len(inside) > 1 and not math.isclose(inside[0], inside[1], rel_tol=1e-9, abs_tol=1e-12):
        raise InfeasibleError(f"ambiguous roots {inside} both admissible")
    return inside[0]


def solve_after_default(mu_pre: float, sigma_pre: float, mu_post: float, sigma_post: float,
                        kappa: float, intensity: float, rho: float = 0.0,
                        theta: ThetaField | None = None, levy: LevyMeasure | None = None,
                        truncation_index: int = 1, tol: float = 1e-12) -> tuple[float, float]:
    """Optimal fractions before and after the default event.

    The pre-default condition carries the default term; after the event the
    asset follows the recovery-regime coefficients and the default term drops.
    """
    foc_pre = make_foc(mu_pre, rho, sigma_pre, kappa, intensity, theta, levy,
                       truncation_index, regime="pre", include_default_term=True)
    foc_post = make_foc(mu_post, rho, sigma_post, kappa=0.0, intensity=0.0, theta=theta,
                        levy=levy, truncation_index=truncation_index, regime="post",
                        include_default_term=False)
    pre = solve_general(foc_pre, tol)
    post = solve_general(foc_post, tol)
    if pre.status != "interior" or post.status != "interior":
        raise InfeasibleError("no interior optimum in one of the regimes")
    return pre.pi, post.pi


# ---------------------------------------------------------------------------
# intensity sweep (optimal fraction as a function of the default intensity)
# ---------------------------------------------------------------------------

@dataclass
class SweepPoint:
    intensity: float
    pi: float


def intensity_sweep(mu_o: float, sigma: float, kappa: float, intensity_grid: Sequence[float],
                 model: str = "uncompensated") -> list[SweepPoint]:
    """Optimal fraction against the default intensity, zero short rate.

    ``uncompensated``: the drift stays mu_o whatever the intensity, so the
    asset's expected return deteriorates with the default risk and the
    position eventually flips short.  ``compensated``: the drift mu_o -
    lambda*kappa keeps the expected return invariant, so the position shrinks
    through risk aversion alone and the two curves coincide only at zero
    intensity.
    """
    if model not in ("uncompensated", "compensated"):
        raise ConfigError(f"unknown sweep model '{model}'", "sweep.model")
    out = []
    for lam in intensity_grid:
        mu = mu_o if model == "uncompensated" else mu_o - lam * kappa
        out.append(SweepPoint(float(lam), solve_full_info(mu, 0.0, sigma, kappa, float(lam))))
    return out


@dataclass
class OptimalPolicy:
    """Grid-indexed optimal fractions plus the residual actually achieved."""

    values: np.ndarray
    method: str
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))


def policy_full_info(coeffs: ModelCoefficients, intensity: float, grid) -> OptimalPolicy:
    """Per-node optimum for deterministic coefficient processes.

    Uses the closed form when theta = 0, otherwise the bracketing solver,
    node by node.
    """
    arrs = coeffs.arrays(grid)
    n = grid.n_steps
    values = np.empty(n)
    residuals = np.empty(n)
    for i in range(n):
        mu, rho, sig, kap = (float(arrs["mu"][0, i]), float(arrs["rho"][0, i]),
                             float(arrs["sigma"][0, i]), float(arrs["kappa"][0, i]))
        if coeffs.theta.is_zero:
            pi = solve_full_info(mu, rho, sig, kap, intensity)
            foc = make_foc(mu, rho, sig, kap, intensity)
            values[i], residuals[i] = pi, foc.residual(pi)
        else:
            foc = make_foc(mu, rho, sig, kap, intensity, coeffs.theta, coeffs.levy,
                           coeffs.truncation_index)
            res = solve_general(foc)
            if res.status != "interior":
                raise InfeasibleError(f"no interior optimum at node {i}")
            values[i], residuals[i] = res.pi, res.residual
    method = "closed_form_full" if coeffs.theta.is_zero else "root_find_general"
    return OptimalPolicy(values=values, method=method, residuals=residuals)
