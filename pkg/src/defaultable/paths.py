"""Joint simulation of the Wiener noise, the marked Poisson events and the
default counting process, on a shared time grid.

Representation. An ensemble stores one row per path:

* ``wiener``        -- (p, n) Gaussian increments, one per grid cell,
* ``mark_z``        -- (p, n + pad) jump sizes, NaN where a cell has no mark;
                       at most one mark per cell (surplus Poisson multiplicity
                       is spread into neighbouring free cells, preserving
                       totals).  ``pad`` extra cells beyond the horizon feed
                       the anticipating window trigger,
* ``default_flags`` -- (p, n) unit-jump indicators of the default process.

Events in cell i occur at the cell's right endpoint t_{i+1}; integrands and
coefficients are evaluated at the left endpoint t_i (left-continuous
convention).  A default landing on a cell that already carries a Poisson mark
is delayed to the next free cell so that the two processes never jump
together on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels as K
from .errors import ConfigError
from .grids import TimeGrid
from .levy import LevyMeasure


# ---------------------------------------------------------------------------
# default mechanisms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DefaultMechanism:
    """How the default counting process is generated.

    kind:
      * ``independent_intensity`` -- per-cell thinning with rate lambda(t),
        independent of the other noises; may jump several times,
      * ``n_window_trigger``      -- a single default at the first time the
        count of Poisson events inside a sliding window of half-width
        ``epsilon`` reaches ``threshold`` (anticipating: the trigger looks
        ``epsilon`` ahead of the default time),
      * ``after_default_regime``  -- at most one default, intensity thinning.
    """

    kind: str
    intensity: float | Callable[[np.ndarray], np.ndarray] | None = None
    epsilon: float | None = None
    threshold: int = 2

    @property
    def couples_to(self) -> tuple[str, ...]:
        return ("N",) if self.kind == "n_window_trigger" else ()

    def validate(self, grid: TimeGrid) -> None:
        if self.kind in ("independent_intensity", "after_default_regime"):
            lam = self.intensity
            if lam is None:
                raise ConfigError("intensity required", "default_mechanism.intensity")
            if not callable(lam) and lam < 0.0:
                raise ConfigError("intensity must be >= 0", "default_mechanism.intensity")
        elif self.kind == "n_window_trigger":
            if self.epsilon is None or self.epsilon < grid.dt:
                raise ConfigError("epsilon must be >= dt", "default_mechanism.epsilon")
            grid.steps_for(self.epsilon)  # must be an integer multiple of dt
            if self.threshold < 1:
                raise ConfigError("threshold must be >= 1", "default_mechanism.threshold")
        else:
            raise ConfigError(f"unknown kind '{self.kind}'", "default_mechanism.kind")

    def window_steps(self, grid: TimeGrid) -> int:
        if self.kind != "n_window_trigger":
            return 0
        return grid.steps_for(self.epsilon)

    def intensity_on(self, grid: TimeGrid) -> np.ndarray:
        lam = self.intensity
        t_left = grid.nodes[:-1]
        if callable(lam):
            out = np.asarray(lam(t_left), dtype=float) * np.ones(grid.n_steps)
        else:
            out = np.full(grid.n_steps, float(lam))
        if np.any(out < 0.0):
            raise ConfigError("intensity must be >= 0 on the whole grid",
                              "default_mechanism.intensity")
        return out


def independent_intensity(intensity) -> DefaultMechanism:
    return DefaultMechanism("independent_intensity", intensity=intensity)


def n_window_trigger(epsilon: float, threshold: int = 2) -> DefaultMechanism:
    return DefaultMechanism("n_window_trigger", epsilon=epsilon, threshold=threshold)


def after_default_regime(intensity) -> DefaultMechanism:
    return DefaultMechanism("after_default_regime", intensity=intensity)


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class ScenarioPath:
    """One joint realization of the three noises on a grid."""

    grid: TimeGrid
    seed: int
    wiener_increments: np.ndarray            # (n,)
    mark_z: np.ndarray                       # (n + pad,), NaN = no mark
    default_flags: np.ndarray                # (n,) bool
    pad_cells: int = 0

    @property
    def poisson_marks(self) -> list[tuple[float, float]]:
        """Grid-snapped (time, size) pairs inside the horizon."""
        n = self.grid.n_steps
        cells = np.nonzero(np.isfinite(self.mark_z[:n]))[0]
        dt = self.grid.dt
        return [(float((c + 1) * dt), float(self.mark_z[c])) for c in cells]

    @property
    def default_jumps(self) -> list[float]:
        cells = np.nonzero(self.default_flags)[0]
        dt = self.grid.dt
        return [float((c + 1) * dt) for c in cells]

    @property
    def wiener_path(self) -> np.ndarray:
        """W at the grid nodes, W(0) = 0; shape (n+1,)."""
        out = np.zeros(self.grid.n_steps + 1)
        np.cumsum(self.wiener_increments, out=out[1:])
        return out


@dataclass
class ScenarioEnsemble:
    """A batch of paths stored as arrays (one row per path)."""

    grid: TimeGrid
    seed: int
    wiener: np.ndarray                        # (p, n)
    mark_z: np.ndarray                        # (p, n + pad)
    default_flags: np.ndarray                 # (p, n) bool
    pad_cells: int = 0
    levy: LevyMeasure | None = None
    truncation_index: int = 1
    mechanism: DefaultMechanism | None = None

    @property
    def n_paths(self) -> int:
        return self.wiener.shape[0]

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def mark_flags(self, include_pad: bool = False) -> np.ndarray:
        flags = np.isfinite(self.mark_z)
        return flags if include_pad else flags[:, : self.n_steps]

    def first_default_cell(self) -> np.ndarray:
        """Cell index of the first default per path; -1 when none."""
        flags = self.default_flags
        any_def = flags.any(axis=1)
        first = np.argmax(flags, axis=1).astype(np.int64)
        first[~any_def] = -1
        return first

    def path(self, i: int) -> ScenarioPath:
        return ScenarioPath(
            grid=self.grid,
            seed=self.seed,
            wiener_increments=self.wiener[i],
            mark_z=self.mark_z[i],
            default_flags=self.default_flags[i],
            pad_cells=self.pad_cells,
        )


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def simulate_wiener(grid: TimeGrid, seed: int) -> np.ndarray:
    """i.i.d. N(0, dt) increments over the grid cells; deterministic in seed."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal(grid.n_steps) * np.sqrt(grid.dt)


def _draw_marks(rng, grid, levy, m, n_paths, pad_cells):
    """At-most-one-per-cell mark sizes over n + pad cells (NaN elsewhere)."""
    n_ext = grid.n_steps + pad_cells
    mark_z = np.full((n_paths, n_ext), np.nan)
    if levy is None:
        return mark_z
    mass = levy.mass(m)
    if not np.isfinite(mass):
        raise ConfigError("nu(U_m) must be finite", "levy")
    if mass <= 0.0:
        return mark_z
    counts = rng.poisson(mass * grid.dt, size=(n_paths, n_ext))
    flags = K.spread_multiplicity(counts.astype(np.int64))
    total = int(flags.sum())
    if total:
        mark_z[flags] = levy.sample(rng, total, m)
    return mark_z


def simulate_poisson_measure(grid: TimeGrid, levy: LevyMeasure, truncation_index: int,
                             seed: int) -> list[tuple[float, float]]:
    """Marked-point realization restricted to the truncation set U_m.

    The event count over [0, T] is Poisson(T * nu(U_m)); sizes are i.i.d.
    from the normalized restriction and times are snapped to the right
    endpoint of their cell (duplicate cells spread to neighbours).
    """
    rng = np.random.default_rng(seed)
    mark_z = _draw_marks(rng, grid, levy, truncation_index, 1, 0)[0]
    cells = np.nonzero(np.isfinite(mark_z))[0]
    dt = grid.dt
    return [(float((c + 1) * dt), float(mark_z[c])) for c in cells]


def _default_flags_from_mechanism(rng, grid, mech, mark_z, pad_cells, n_paths):
    n = grid.n_steps
    if mech is None:
        return np.zeros((n_paths, n), dtype=bool)
    mech.validate(grid)
    occupied = np.isfinite(mark_z)
    if mech.kind == "n_window_trigger":
        k = mech.window_steps(grid)
        counts = occupied.astype(np.int64)
        tau_nodes = K.window_first_trigger(counts, k, mech.threshold, n)
        flags = np.zeros((n_paths, n + pad_cells), dtype=bool)
        hit = tau_nodes >= 0
        cells = np.maximum(tau_nodes[hit] - 1, 0)
        flags[np.nonzero(hit)[0], cells] = True
    else:
        lam = mech.intensity_on(grid)
        prob = np.clip(lam * grid.dt, 0.0, 1.0)
        raw = rng.uniform(size=(n_paths, n)) < prob[None, :]
        if mech.kind == "after_default_regime":
            raw &= np.cumsum(raw, axis=1) == 1
        flags = np.zeros((n_paths, n + pad_cells), dtype=bool)
        flags[:, :n] = raw
    # defaults never share a cell with a Poisson mark: delay to the next free cell
    return K.shift_collisions(flags, occupied, n)


def simulate_default(grid: TimeGrid, mech: DefaultMechanism, path_so_far: ScenarioPath,
                     seed: int) -> list[float]:
    """Default times for one path, given its Poisson marks.

    The window trigger scans the marks attached to ``path_so_far`` (including
    any padding beyond the horizon); intensity mechanisms thin independently.
    """
    rng = np.random.default_rng(seed)
    mark_z = path_so_far.mark_z[None, :]
    flags = _default_flags_from_mechanism(rng, grid, mech, mark_z, path_so_far.pad_cells, 1)[0]
    dt = grid.dt
    return [float((c + 1) * dt) for c in np.nonzero(flags)[0]]


def simulate_ensemble(grid: TimeGrid, n_paths: int, seed: int,
                      levy: LevyMeasure | None = None, truncation_index: int = 1,
                      mechanism: DefaultMechanism | None = None,
                      pad_cells: int | None = None) -> ScenarioEnsemble:
    """Joint ensemble of Wiener increments, Poisson marks and defaults.

    Draws are made in a fixed order (Wiener, mark counts, mark sizes, default
    thinning) from a single generator seeded with ``seed``, so identical
    inputs reproduce identical arrays bit for bit.  For the window trigger,
    marks are simulated ``epsilon`` beyond the horizon so late triggers are
    not missed.
    """
    rng = np.random.default_rng(seed)
    if pad_cells is None:
        pad_cells = mechanism.window_steps(grid) if mechanism is not None else 0
    wiener = rng.standard_normal((n_paths, grid.n_steps)) * np.sqrt(grid.dt)
    mark_z = _draw_marks(rng, grid, levy, truncation_index, n_paths, pad_cells)
    default_flags = _default_flags_from_mechanism(rng, grid, mechanism, mark_z,
                                                  pad_cells, n_paths)
    return ScenarioEnsemble(grid=grid, seed=seed, wiener=wiener, mark_z=mark_z,
                            default_flags=default_flags, pad_cells=pad_cells,
                            levy=levy, truncation_index=truncation_index,
                            mechanism=mechanism)


def simulate_path(grid: TimeGrid, seed: int, levy: LevyMeasure | None = None,
                  truncation_index: int = 1,
                  mechanism: DefaultMechanism | None = None) -> ScenarioPath:
    """Single-path convenience wrapper around :func:`simulate_ensemble`."""
    ens = simulate_ensemble(grid, 1, seed, levy, truncation_index, mechanism)
    return ens.path(0)


def coarsen_ensemble(ens: ScenarioEnsemble, factor: int) -> ScenarioEnsemble:
    """Aggregate an ensemble onto a grid coarser by ``factor``.

    Wiener increments are summed per coarse cell; marks and defaults are
    re-snapped (several fine events falling into one coarse cell are spread
    into neighbouring free cells, as in direct simulation).  Intended for
    refinement studies; window-trigger mechanisms should be re-simulated
    rather than coarsened.
    """
    n = ens.n_steps
    if n % factor != 0:
        raise ConfigError(f"n_steps={n} not divisible by factor={factor}", "grid")
    grid_c = TimeGrid(ens.grid.horizon, n // factor)
    p = ens.n_paths
    wiener = ens.wiener.reshape(p, n // factor, factor).sum(axis=2)

    counts = ens.mark_flags().astype(np.int64).reshape(p, n // factor, factor).sum(axis=2)
    flags = K.spread_multiplicity(counts)
    mark_z = np.full((p, n // factor), np.nan)
    src = ens.mark_z[:, :n]
    fine_vals = src[np.isfinite(src)]
    mark_z[flags] = fine_vals  # row-major order preserved on both sides

    dcounts = ens.default_flags.astype(np.int64).reshape(p, n // factor, factor).sum(axis=2)
    dflags = K.spread_multiplicity(dcounts)
    dflags = K.shift_collisions(dflags, np.isfinite(mark_z), n // factor)
    return ScenarioEnsemble(grid=grid_c, seed=ens.seed, wiener=wiener, mark_z=mark_z,
                            default_flags=dflags, pad_cells=0, levy=ens.levy,
                            truncation_index=ens.truncation_index, mechanism=ens.mechanism)


def save_path_bundle(ens: ScenarioEnsemble, directory) -> None:
    """Serialize an ensemble to a CSV bundle (plus meta.json) for audit reuse.

    Files: ``wiener.csv`` (one row per path), ``marks.csv`` (path, cell, z),
    ``defaults.csv`` (path, cell), ``meta.json`` (grid, seed, pad).  Bundles
    round-trip bit-exactly through :func:`load_path_bundle`.
    """
    import json
    from pathlib import Path

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [",".join(repr(float(x)) for x in row) for row in ens.wiener]
    (out / "wiener.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    rows = ["path,cell,z"]
    ps, cs = np.nonzero(np.isfinite(ens.mark_z))
    rows.extend(f"{p},{c},{float(ens.mark_z[p, c])!r}" for p, c in zip(ps, cs))
    (out / "marks.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    rows = ["path,cell"]
    ps, cs = np.nonzero(ens.default_flags)
    rows.extend(f"{p},{c}" for p, c in zip(ps, cs))
    (out / "defaults.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    meta = {"horizon": ens.grid.horizon, "n_steps": ens.grid.n_steps,
            "n_paths": ens.n_paths, "pad_cells": ens.pad_cells,
            "seed": str(ens.seed)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_path_bundle(directory) -> ScenarioEnsemble:
    """Inverse of :func:`save_path_bundle` (measure/mechanism not attached)."""
    import json
    from pathlib import Path

    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
    grid = TimeGrid(meta["horizon"], meta["n_steps"])
    wiener = np.array([[float(x) for x in line.split(",")]
                       for line in (src / "wiener.csv").read_text().strip().split("\n")])
    p = meta["n_paths"]
    n_ext = meta["n_steps"] + meta["pad_cells"]
    mark_z = np.full((p, n_ext), np.nan)
    for line in (src / "marks.csv").read_text().strip().split("\n")[1:]:
        if not line:
            continue
        pi, ci, z = line.split(",")
        mark_z[int(pi), int(ci)] = float(z)
    flags = np.zeros((p, meta["n_steps"]), dtype=bool)
    for line in (src / "defaults.csv").read_text().strip().split("\n")[1:]:
        if not line:
            continue
        pi, ci = line.split(",")
        flags[int(pi), int(ci)] = True
    return ScenarioEnsemble(grid=grid, seed=meta["seed"], wiener=wiener, mark_z=mark_z,
                            default_flags=flags, pad_cells=meta["pad_cells"])


def ensemble_batches(grid: TimeGrid, total_paths: int, batch_size: int, master_seed: int,
                     **kwargs):
    """Yield ensembles of at most ``batch_size`` paths with derived seeds.

    Batch b uses the stream ``SeedSequence((master_seed, b))``; the partition
    into batches is part of the reproducibility contract, so callers must fix
    ``batch_size`` when comparing runs.
    """
    b = 0
    done = 0
    while done < total_paths:
        take = min(batch_size, total_paths - done)
        rng_seed = np.random.SeedSequence((int(master_seed), b))
        yield simulate_ensemble(grid, take, rng_seed, **kwargs)
        done += take
        b += 1
