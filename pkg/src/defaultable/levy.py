"""Jump-size measures: finite atom lists and truncated densities.

A measure exposes an increasing family of compact truncation sets U_1 within
U_2 within ... (all excluding zero) with finite mass on each; simulation and
quadrature always work on one truncation level ``m``.  Atom measures are
summed exactly; density measures are integrated by a fixed-order composite
Simpson rule with a reported error estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

_SIMPSON_CELLS = 256  # per side and truncation level; doubled for the error estimate


def _composite_simpson(f, lo, hi, cells):
    if hi <= lo:
        return 0.0
    x = np.linspace(lo, hi, 2 * cells + 1)
    y = np.asarray(f(x), dtype=float)
    h = (hi - lo) / (2 * cells)
    return float(h / 3.0 * (y[0] + y[-1] + 4.0 * y[1::2].sum() + 2.0 * y[2:-1:2].sum()))


class LevyMeasure:
    """Interface shared by the concrete jump measures."""

    def n_truncations(self) -> int:
        raise NotImplementedError

    def mass(self, m: int) -> float:
        """nu(U_m); must be finite."""
        raise NotImplementedError

    def integrate(self, f: Callable[[np.ndarray], np.ndarray], m: int) -> float:
        """integral of f(z) against nu over U_m."""
        raise NotImplementedError

    def integrate_with_error(self, f, m: int) -> tuple[float, float]:
        """Same plus a quadrature-error estimate (0 for atom sums)."""
        return self.integrate(f, m), 0.0

    def second_moment(self, m: int | None = None) -> float:
        m = self.n_truncations() if m is None else m
        return self.integrate(lambda z: z * z, m)

    def support_points(self, m: int) -> np.ndarray:
        """Representative z values covering U_m (used for margin checks)."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int, m: int) -> np.ndarray:
        """i.i.d. draws from nu restricted to U_m and normalized."""
        raise NotImplementedError

    def _check_level(self, m: int):
        if not 1 <= m <= self.n_truncations():
            raise ConfigError(
                f"truncation index {m} outside 1..{self.n_truncations()}", "levy.truncation"
            )


@dataclass(frozen=True)
class AtomMeasure(LevyMeasure):
    """Finite-activity measure nu = sum_k rate_k * delta(z_k).

    ``cutoffs`` optionally defines truncation levels U_m = {|z| >= cutoffs[m-1]}
    with decreasing cutoffs; by default there is a single level containing
    every atom.
    """

    atoms: tuple[tuple[float, float], ...]
    cutoffs: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.atoms:
            raise ConfigError("atom list must be non-empty", "levy.atoms")
        for z, rate in self.atoms:
            if z == 0.0:
                raise ConfigError("atom at z=0 is not allowed", "levy.atoms")
            if rate <= 0.0 or not np.isfinite(rate):
                raise ConfigError(f"atom rate {rate} must be positive and finite", "levy.atoms")
        if self.cutoffs and any(b >= a for a, b in zip(self.cutoffs, self.cutoffs[1:])):
            raise ConfigError("cutoffs must be strictly decreasing", "levy.cutoffs")

    def n_truncations(self) -> int:
        return max(1, len(self.cutoffs))

    def _level_atoms(self, m: int):
        self._check_level(m)
        if not self.cutoffs:
            return self.atoms
        cut = self.cutoffs[m - 1]
        kept = tuple(a for a in self.atoms if abs(a[0]) >= cut)
        return kept

    def mass(self, m: int) -> float:
        return float(sum(rate for _, rate in self._level_atoms(m)))

    def integrate(self, f, m: int) -> float:
        zs = np.array([z for z, _ in self._level_atoms(m)])
        rates = np.array([r for _, r in self._level_atoms(m)])
        if zs.size == 0:
            return 0.0
        return float(np.sum(np.asarray(f(zs), dtype=float) * rates))

    def support_points(self, m: int) -> np.ndarray:
        return np.array([z for z, _ in self._level_atoms(m)])

    def sample(self, rng, size, m):
        atoms = self._level_atoms(m)
        zs = np.array([z for z, _ in atoms])
        rates = np.array([r for _, r in atoms])
        if zs.size == 0 or size == 0:
            return np.empty(0)
        probs = rates / rates.sum()
        return rng.choice(zs, size=size, p=probs)


@dataclass(frozen=True)
class DensityMeasure(LevyMeasure):
    """Measure with density nu(dz) = g(z) dz on [-outer, -inner] u [inner, outer].

    Truncation level m keeps {inner_cutoffs[m-1] <= |z| <= outer}; the cutoffs
    decrease so the sets increase.  Densities with an integrable pole at 0
    (e.g. stable-like g(z) = c |z|^{-1-alpha}) are the intended use; the mass
    of each truncated set must be finite, which holds by construction here.
    Sampling inverts a tabulated CDF on a fine grid per side.
    """

    density: Callable[[np.ndarray], np.ndarray]
    inner_cutoffs: tuple[float, ...]
    outer: float
    two_sided: bool = True
    _cdf_cells: int = field(default=4096, repr=False)

    def __post_init__(self):
        if not self.inner_cutoffs:
            raise ConfigError("at least one inner cutoff required", "levy.inner_cutoffs")
        if any(b >= a for a, b in zip(self.inner_cutoffs, self.inner_cutoffs[1:])):
            raise ConfigError("inner cutoffs must be strictly decreasing", "levy.inner_cutoffs")
        if self.inner_cutoffs[0] >= self.outer or self.inner_cutoffs[-1] <= 0.0:
            raise ConfigError("cutoffs must satisfy 0 < a_m < outer", "levy.inner_cutoffs")

    def n_truncations(self) -> int:
        return len(self.inner_cutoffs)

    def _sides(self, m: int):
        self._check_level(m)
        a, b = self.inner_cutoffs[m - 1], self.outer
        sides = [(a, b)]
        if self.two_sided:
            sides.append((-b, -a))
        return sides

    def integrate_with_error(self, f, m: int) -> tuple[float, float]:
        total, coarse = 0.0, 0.0
        for lo, hi in self._sides(m):
            g = lambda z: np.asarray(f(z), dtype=float) * np.asarray(self.density(z), dtype=float)
            fine = _composite_simpson(g, lo, hi, _SIMPSON_CELLS)
            half = _composite_simpson(g, lo, hi, _SIMPSON_CELLS // 2)
            total += fine
            coarse += half
        err = abs(total - coarse) / 15.0  # Richardson estimate for Simpson
        if not np.isfinite(total):
            raise ConfigError("density quadrature produced a non-finite value", "levy.density")
        return total, err

    def integrate(self, f, m: int) -> float:
        return self.integrate_with_error(f, m)[0]

    def mass(self, m: int) -> float:
        value = self.integrate(lambda z: np.ones_like(z), m)
        if not np.isfinite(value):
            raise ConfigError("nu(U_m) is not finite", "levy.density")
        return value

    def support_points(self, m: int) -> np.ndarray:
        pts = []
        for lo, hi in self._sides(m):
            pts.append(np.linspace(lo, hi, 33))
        return np.concatenate(pts)

    def _tabulate(self, m: int):
        xs, pdf = [], []
        for lo, hi in self._sides(m):
            x = np.linspace(lo, hi, self._cdf_cells + 1)
            xs.append(x)
            pdf.append(np.asarray(self.density(x), dtype=float))
        return xs, pdf

    def sample(self, rng, size, m):
        if size == 0:
            return np.empty(0)
        xs, pdfs = self._tabulate(m)
        cell_mass, cell_lo, cell_hi = [], [], []
        for x, p in zip(xs, pdfs):
            mids = 0.5 * (p[:-1] + p[1:]) * np.diff(x)
            cell_mass.append(mids)
            cell_lo.append(x[:-1])
            cell_hi.append(x[1:])
        mass = np.concatenate(cell_mass)
        lo = np.concatenate(cell_lo)
        hi = np.concatenate(cell_hi)
        probs = mass / mass.sum()
        idx = rng.choice(mass.size, size=size, p=probs)
        u = rng.uniform(size=size)
        return lo[idx] + u * (hi[idx] - lo[idx])


def power_law_measure(alpha: float, scale: float, inner_cutoffs: Sequence[float],
                      outer: float, two_sided: bool = True) -> DensityMeasure:
    """Stable-like density g(z) = scale * |z|^(-1-alpha), truncated."""
    if not 0.0 < alpha < 2.0:
        raise ConfigError("alpha must lie in (0, 2)", "levy.alpha")

    def g(z):
        return scale * np.abs(z) ** (-1.0 - alpha)

    return DensityMeasure(g, tuple(float(a) for a in inner_cutoffs), float(outer), two_sided)
