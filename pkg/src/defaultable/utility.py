"""Utility functions and the relative-risk-aversion gate used by the
concavity results (x u''(x) + u'(x) <= 0, i.e. relative risk aversion >= 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LogUtility:
    name: str = "log"
    risk_aversion_at_least_one: bool = True   # x u'' + u' = 0

    def u(self, x):
        return np.log(x)

    def marginal(self, x):
        return 1.0 / x

    def second(self, x):
        return -1.0 / (x * x)


@dataclass(frozen=True)
class PowerUtility:
    """u(x) = x^(1-c) / (1-c), c > 0 and c != 1."""

    c: float
    name: str = "power"

    def __post_init__(self):
        if self.c <= 0 or self.c == 1.0:
            raise ValueError("power utility needs c > 0, c != 1")

    @property
    def risk_aversion_at_least_one(self) -> bool:
        return self.c >= 1.0

    def u(self, x):
        return np.power(x, 1.0 - self.c) / (1.0 - self.c)

    def marginal(self, x):
        return np.power(x, -self.c)

    def second(self, x):
        return -self.c * np.power(x, -self.c - 1.0)


@dataclass(frozen=True)
class ExponentialUtility:
    """u(x) = -exp(-gamma x) / gamma; fails the risk-aversion gate."""

    gamma: float
    name: str = "exponential"
    risk_aversion_at_least_one: bool = False

    def u(self, x):
        return -np.exp(-self.gamma * x) / self.gamma

    def marginal(self, x):
        return np.exp(-self.gamma * x)

    def second(self, x):
        return -self.gamma * np.exp(-self.gamma * x)


def risk_aversion_margin(utility, x):
    """x u''(x) + u'(x); concavity of the perturbed objective needs <= 0."""
    x = np.asarray(x, dtype=float)
    return x * utility.second(x) + utility.marginal(x)


def satisfies_risk_aversion_bound(utility, xs=None, tol: float = 1e-12) -> bool:
    """Numeric check of the gate on a wealth sample (default: log-spaced)."""
    if xs is None:
        xs = np.geomspace(1e-3, 1e3, 241)
    return bool(np.all(risk_aversion_margin(utility, xs) <= tol))


def make_utility(kind: str, **params):
    if kind == "log":
        return LogUtility()
    if kind == "power":
        return PowerUtility(c=float(params.get("c", 2.0)))
    if kind == "exponential":
        return ExponentialUtility(gamma=float(params.get("gamma", 1.0)))
    raise ValueError(f"unknown utility '{kind}'")
