"""Information flows: which part of a scenario an investor observes per node.

A flow turns an ensemble into named per-node state arrays of shape
(n_paths, n_nodes + 1).  Portfolio adaptedness and all conditional statistics
(bucketing, regression) are defined against these arrays and nothing else.

Kinds:
  * ``partial``      -- a declared subset of {"W", "N", "H"},
  * ``full``         -- all three histories,
  * ``anticipating`` -- full, plus forward-looking fields: the event count of
    the Poisson process over (t - eps, t + eps] (``NWIN``, matching the
    window trigger) and/or the sign of the Wiener increment over (t, t + eps]
    (``WSIGN``).  Forward-looking fields are undefined near the right edge
    and reported as -1 there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .paths import ScenarioEnsemble

_HISTORIES = ("W", "N", "H")


@dataclass(frozen=True)
class InformationFlow:
    kind: str                                  # "partial" | "full" | "anticipating"
    observables: tuple[str, ...] = _HISTORIES
    window_steps: int = 0                      # NWIN half-width, in cells
    wiener_sign_steps: int = 0                 # WSIGN look-ahead, in cells

    def __post_init__(self):
        if self.kind not in ("partial", "full", "anticipating"):
            raise ConfigError(f"unknown kind '{self.kind}'", "information_flow.kind")
        bad = set(self.observables) - set(_HISTORIES)
        if bad:
            raise ConfigError(f"unknown observables {sorted(bad)}", "information_flow.observables")
        if self.kind in ("full", "anticipating") and set(self.observables) != set(_HISTORIES):
            raise ConfigError("full/anticipating flows observe W, N and H",
                              "information_flow.observables")
        if self.kind != "anticipating" and (self.window_steps or self.wiener_sign_steps):
            raise ConfigError("look-ahead fields require kind='anticipating'",
                              "information_flow")

    @property
    def fields(self) -> tuple[str, ...]:
        out = list(self.observables)
        if self.window_steps:
            out.append("NWIN")
        if self.wiener_sign_steps:
            out.append("WSIGN")
        return tuple(out)

    def state_arrays(self, ens: ScenarioEnsemble) -> dict[str, np.ndarray]:
        """Observable state per node, keyed by field name."""
        p, n = ens.n_paths, ens.n_steps
        out: dict[str, np.ndarray] = {}
        if "W" in self.observables:
            w = np.zeros((p, n + 1))
            np.cumsum(ens.wiener, axis=1, out=w[:, 1:])
            out["W"] = w
        marks = ens.mark_flags(include_pad=True)
        if "N" in self.observables:
            ncum = np.zeros((p, n + 1))
            np.cumsum(marks[:, :n], axis=1, out=ncum[:, 1:])
            out["N"] = ncum
        if "H" in self.observables:
            h = np.zeros((p, n + 1))
            np.cumsum(ens.default_flags, axis=1, out=h[:, 1:])
            out["H"] = h
        if self.window_steps:
            k = self.window_steps
            cum = np.zeros((p, marks.shape[1] + 1), dtype=np.int64)
            np.cumsum(marks, axis=1, out=cum[:, 1:])
            u = np.arange(n + 1)
            lo = np.maximum(u - k, 0)
            hi = np.minimum(u + k, marks.shape[1])
            win = (cum[:, hi] - cum[:, lo]).astype(float)
            win[:, hi < u + k] = -1.0  # window truncated by the simulated horizon
            out["NWIN"] = win
        if self.wiener_sign_steps:
            k = self.wiener_sign_steps
            w = np.zeros((p, n + 1))
            np.cumsum(ens.wiener, axis=1, out=w[:, 1:])
            sign = np.full((p, n + 1), -1.0)
            ahead = w[:, k:] - w[:, : n + 1 - k]
            sign[:, : n + 1 - k] = (ahead >= 0.0).astype(float)
            out["WSIGN"] = sign
        return out

    def state_at(self, ens: ScenarioEnsemble, node: int) -> np.ndarray:
        """(n_paths, n_fields) state matrix at one node, fields in declared order."""
        arrays = self.state_arrays(ens)
        return np.column_stack([arrays[f][:, node] for f in self.fields])


def partial_information(observables) -> InformationFlow:
    obs = tuple(observables)
    return InformationFlow("partial", obs)


def full_information() -> InformationFlow:
    return InformationFlow("full")


def anticipating_information(window_steps: int = 0, wiener_sign_steps: int = 0) -> InformationFlow:
    return InformationFlow("anticipating", _HISTORIES, window_steps, wiener_sign_steps)
