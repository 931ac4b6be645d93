"""Uniform time grids and the seed-splitting rule shared by all simulations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [0, T].

    Nodes are t_0 = 0 < t_1 < ... < t_n = T with t_i = i * dt.  Cell i is the
    half-open interval (t_i, t_{i+1}]; left-continuous processes carry the
    value fixed at t_i over cell i, and events inside a cell are snapped to
    its right endpoint.
    """

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (self.horizon > 0.0 and np.isfinite(self.horizon)):
            raise ConfigError("horizon must be a positive finite number", "grid.horizon")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1", "grid.n_steps")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def node_index(self, t: float) -> int:
        """Index of the grid node closest to ``t``; ``t`` must sit on the grid."""
        idx = int(round(t / self.dt))
        if idx < 0 or idx > self.n_steps or abs(idx * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            raise ConfigError(f"time {t} is not a grid node", "grid")
        return idx

    def steps_for(self, duration: float) -> int:
        """Number of whole cells covering ``duration``; must divide exactly."""
        k = int(round(duration / self.dt))
        if k < 1 or abs(k * self.dt - duration) > 1e-9 * max(1.0, self.horizon):
            raise ConfigError(
                f"duration {duration} is not a positive integer multiple of dt={self.dt}", "grid"
            )
        return k

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


def child_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent generator for stream ``index`` derived from a master seed.

    The splitting rule is ``SeedSequence((master_seed, index))``; the same
    (seed, index) pair always yields the same stream, and distinct indices
    yield independent streams.  Batch runners use the batch number as the
    index, per-path simulators the path number.
    """
    return np.random.default_rng(np.random.SeedSequence((int(master_seed), int(index))))
