"""Experiment configuration: strict JSON schema, presets, object builders.

A configuration is a nested JSON object whose sections mirror the package
modules (grid, coefficients, levy, default_mechanism, information_flow,
utility, stopping, audit, ensemble, ...).  Validation is strict: any unknown
section or key fails before any simulation starts, and the error names the
dotted path of the offending key.  All rates are per year and times in years.
"""

from __future__ import annotations

import copy
import json
from typing import Any

from .errors import ConfigError
from .flows import InformationFlow
from .grids import TimeGrid
from .levy import AtomMeasure, LevyMeasure, power_law_measure
from .market import ModelCoefficients, RegimeSwitch, StoppingRule, ThetaField
from .paths import DefaultMechanism
from .utility import make_utility

EXPERIMENTS = ("figure1", "pathology", "merton", "after_default",
               "anticipating_compensator", "martingale_audit", "partial_info",
               "empty_market")


# ---------------------------------------------------------------------------
# leaf validators
# ---------------------------------------------------------------------------

def _num(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", path)
    return float(v)


def _num_pos(v, path):
    x = _num(v, path)
    if x <= 0:
        raise ConfigError(f"expected a positive number, got {v!r}", path)
    return x


def _num_nonneg(v, path):
    x = _num(v, path)
    if x < 0:
        raise ConfigError(f"expected a non-negative number, got {v!r}", path)
    return x


def _int_pos(v, path):
    if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
        raise ConfigError(f"expected a positive integer, got {v!r}", path)
    return v


def _bool(v, path):
    if not isinstance(v, bool):
        raise ConfigError(f"expected a boolean, got {v!r}", path)
    return v


def _choice(options):
    def check(v, path):
        if v not in options:
            raise ConfigError(f"expected one of {options}, got {v!r}", path)
        return v
    return check


def _coef(v, path):
    """A coefficient: number or {"pre": number, "post": number}."""
    if isinstance(v, dict):
        unknown = set(v) - {"pre", "post"}
        if unknown:
            raise ConfigError(f"unknown key", f"{path}.{sorted(unknown)[0]}")
        if "pre" not in v or "post" not in v:
            raise ConfigError("regime coefficient needs both 'pre' and 'post'", path)
        return {"pre": _num(v["pre"], f"{path}.pre"), "post": _num(v["post"], f"{path}.post")}
    return _num(v, path)


def _num_list(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"expected a non-empty list of numbers, got {v!r}", path)
    return [_num(x, f"{path}[{i}]") for i, x in enumerate(v)]


def _int_list(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"expected a non-empty list of integers, got {v!r}", path)
    return [_int_pos(x, f"{path}[{i}]") for i, x in enumerate(v)]


def _pairs(v, path):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"expected a non-empty list of [a, b] pairs, got {v!r}", path)
    out = []
    for i, item in enumerate(v):
        if not isinstance(item, list) or len(item) != 2:
            raise ConfigError(f"expected an [a, b] pair, got {item!r}", f"{path}[{i}]")
        out.append([_num(item[0], f"{path}[{i}][0]"), _num(item[1], f"{path}[{i}][1]")])
    return out


# section -> {key: (validator, required)}
_SCHEMA: dict[str, dict[str, tuple]] = {
    "grid": {"horizon": (_num_pos, True), "n_steps": (_int_pos, True)},
    "coefficients": {
        "rho": (_coef, False), "mu": (_coef, False), "sigma": (_coef, False),
        "kappa": (_coef, False),
        "theta": (None, False),     # nested, handled specially
    },
    "levy": {
        "kind": (_choice(("none", "atoms", "power")), True),
        "atoms": (_pairs, False), "cutoffs": (_num_list, False),
        "alpha": (_num_pos, False), "scale": (_num_pos, False),
        "inner_cutoffs": (_num_list, False), "outer": (_num_pos, False),
        "two_sided": (_bool, False), "truncation_index": (_int_pos, False),
    },
    "default_mechanism": {
        "kind": (_choice(("none", "independent", "window", "after_default")), True),
        "intensity": (_num_nonneg, False), "epsilon": (_num_pos, False),
        "threshold": (_int_pos, False),
    },
    "information_flow": {
        "kind": (_choice(("partial", "full", "anticipating")), True),
        "observables": (None, False), "window_steps": (_int_pos, False),
        "wiener_sign_steps": (_int_pos, False),
    },
    "utility": {"kind": (_choice(("log", "power", "exponential")), True),
                "c": (_num_pos, False), "gamma": (_num_pos, False)},
    "stopping": {"kind": (_choice(("first_default", "horizon_only", "zero_value")), True)},
    "solver": {"tolerance": (_num_pos, False), "shift": (_num, False)},
    "audit": {"times": (_pairs, True), "significance": (_num_pos, True),
              "min_bucket": (_int_pos, True)},
    "ensemble": {"paths": (_int_pos, True), "seed": (_int_pos, True),
                 "batch": (_int_pos, False), "workers": (_int_pos, False)},
    "sweep": {"mu_o": (_num, True), "sigma": (_num_pos, True), "kappa": (_num, True),
              "intensity_min": (_num_nonneg, True), "intensity_max": (_num_pos, True),
              "points": (_int_pos, True)},
    "pathology": {"n_list": (_int_list, True), "paths_per_n": (_int_pos, True)},
    "partial": {"intensity_low": (_num_nonneg, True), "intensity_high": (_num_pos, True),
                "prior_low": (_num_pos, True), "observe_time": (_num_pos, True),
                "scan_step": (_num_pos, False)},
    "outputs": {"plots": (_bool, False)},
}

_THETA_KEYS = {"kind": (_choice(("zero", "constant", "linear")), True), "coef": (_coef, False)}
_OBSERVABLES = ("W", "N", "H")

# experiment -> required sections beyond "experiment"
_REQUIRED: dict[str, tuple[str, ...]] = {
    "figure1": ("sweep",),
    "pathology": ("pathology", "ensemble"),
    "merton": ("grid", "coefficients", "ensemble"),
    "after_default": ("grid", "coefficients", "levy", "default_mechanism"),
    "anticipating_compensator": ("grid", "levy", "default_mechanism", "ensemble"),
    "martingale_audit": ("grid", "coefficients", "default_mechanism", "information_flow",
                         "utility", "stopping", "audit", "ensemble"),
    "partial_info": ("coefficients", "partial", "ensemble"),
    "empty_market": ("grid", "coefficients"),
}


def _validate_section(name: str, data: Any) -> dict:
    spec = _SCHEMA[name]
    if not isinstance(data, dict):
        raise ConfigError("expected an object", name)
    out = {}
    for key, value in data.items():
        if key not in spec:
            raise ConfigError("unknown key", f"{name}.{key}")
        validator, _req = spec[key]
        path = f"{name}.{key}"
        if name == "coefficients" and key == "theta":
            out[key] = _validate_theta(value, path)
        elif name == "information_flow" and key == "observables":
            if (not isinstance(value, list)
                    or any(o not in _OBSERVABLES for o in value) or not value):
                raise ConfigError(f"expected a non-empty subset of {_OBSERVABLES}", path)
            out[key] = list(value)
        else:
            out[key] = validator(value, path)
    for key, (_v, required) in spec.items():
        if required and key not in out:
            raise ConfigError("missing required key", f"{name}.{key}")
    return out


def _validate_theta(data, path) -> dict:
    if not isinstance(data, dict):
        raise ConfigError("expected an object", path)
    out = {}
    for key, value in data.items():
        if key not in _THETA_KEYS:
            raise ConfigError("unknown key", f"{path}.{key}")
        out[key] = _THETA_KEYS[key][0](value, f"{path}.{key}")
    if "kind" not in out:
        raise ConfigError("missing required key", f"{path}.kind")
    return out


class ExperimentConfig:
    """A validated configuration; ``raw`` keeps the normalized dict."""

    def __init__(self, raw: dict):
        self.raw = raw

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    def section(self, name: str, default=None):
        return self.raw.get(name, default)


def validate_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object", "")
    if "experiment" not in data:
        raise ConfigError("missing required key", "experiment")
    out: dict[str, Any] = {}
    for key, value in data.items():
        if key == "experiment":
            out[key] = _choice(EXPERIMENTS)(value, "experiment")
        elif key in _SCHEMA:
            out[key] = _validate_section(key, value)
        else:
            raise ConfigError("unknown key", key)
    for section in _REQUIRED[out["experiment"]]:
        if section not in out:
            raise ConfigError(f"experiment '{out['experiment']}' requires section", section)
    cfg = ExperimentConfig(out)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: ExperimentConfig):
    """Module-level preconditions that span sections."""
    grid_cfg = cfg.section("grid")
    mech = cfg.section("default_mechanism")
    if grid_cfg and mech and mech["kind"] == "window":
        grid = TimeGrid(grid_cfg["horizon"], grid_cfg["n_steps"])
        build_mechanism(mech).validate(grid)   # epsilon multiple of dt, >= dt
    levy = cfg.section("levy")
    if levy:
        build_levy(levy)                       # finite masses, valid cutoffs
    coeffs = cfg.section("coefficients")
    if coeffs and grid_cfg:
        grid = TimeGrid(grid_cfg["horizon"], grid_cfg["n_steps"])
        build_coefficients(coeffs, build_levy(levy) if levy else None,
                           (levy or {}).get("truncation_index", 1)).validate(grid)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", path) from exc
    return validate_config(data)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_grid(cfg: dict) -> TimeGrid:
    return TimeGrid(cfg["horizon"], cfg["n_steps"])


def build_levy(cfg: dict | None) -> LevyMeasure | None:
    if cfg is None or cfg["kind"] == "none":
        return None
    if cfg["kind"] == "atoms":
        if "atoms" not in cfg:
            raise ConfigError("atom measure needs 'atoms'", "levy.atoms")
        return AtomMeasure(tuple((z, r) for z, r in cfg["atoms"]),
                           tuple(cfg.get("cutoffs", ())))
    for key in ("alpha", "scale", "inner_cutoffs", "outer"):
        if key not in cfg:
            raise ConfigError(f"power measure needs '{key}'", f"levy.{key}")
    return power_law_measure(cfg["alpha"], cfg["scale"], cfg["inner_cutoffs"],
                             cfg["outer"], cfg.get("two_sided", True))


def build_mechanism(cfg: dict | None) -> DefaultMechanism | None:
    if cfg is None or cfg["kind"] == "none":
        return None
    if cfg["kind"] == "independent":
        if "intensity" not in cfg:
            raise ConfigError("independent mechanism needs 'intensity'",
                              "default_mechanism.intensity")
        return DefaultMechanism("independent_intensity", intensity=cfg["intensity"])
    if cfg["kind"] == "window":
        if "epsilon" not in cfg:
            raise ConfigError("window mechanism needs 'epsilon'", "default_mechanism.epsilon")
        return DefaultMechanism("n_window_trigger", epsilon=cfg["epsilon"],
                                threshold=cfg.get("threshold", 2))
    return DefaultMechanism("after_default_regime", intensity=cfg.get("intensity", 0.0))


def build_flow(cfg: dict | None) -> InformationFlow:
    if cfg is None:
        return InformationFlow("full")
    return InformationFlow(cfg["kind"],
                           tuple(cfg.get("observables", _OBSERVABLES)),
                           cfg.get("window_steps", 0), cfg.get("wiener_sign_steps", 0))


def _coef_spec(v):
    if isinstance(v, dict):
        return RegimeSwitch(v["pre"], v["post"])
    return v


def build_coefficients(cfg: dict | None, levy: LevyMeasure | None = None,
                       truncation_index: int = 1) -> ModelCoefficients:
    cfg = cfg or {}
    theta_cfg = cfg.get("theta", {"kind": "zero"})
    theta = ThetaField(theta_cfg["kind"], _coef_spec(theta_cfg.get("coef", 0.0)))
    return ModelCoefficients(
        rho=_coef_spec(cfg.get("rho", 0.0)), mu=_coef_spec(cfg.get("mu", 0.0)),
        sigma=_coef_spec(cfg.get("sigma", 0.0)), kappa=_coef_spec(cfg.get("kappa", 0.0)),
        theta=theta, levy=levy, truncation_index=truncation_index)


def build_utility(cfg: dict | None):
    cfg = cfg or {"kind": "log"}
    return make_utility(cfg["kind"], **{k: v for k, v in cfg.items() if k != "kind"})


def build_stopping(cfg: dict | None) -> StoppingRule:
    return StoppingRule((cfg or {"kind": "first_default"})["kind"])


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_PRESETS: dict[str, dict] = {
    "figure1": {
        "experiment": "figure1",
        "sweep": {"mu_o": 0.08, "sigma": 0.3, "kappa": -0.5,
                  "intensity_min": 0.0, "intensity_max": 0.32, "points": 33},
        "outputs": {"plots": True},
    },
    "pathology": {
        "experiment": "pathology",
        "pathology": {"n_list": [4, 16, 64, 256], "paths_per_n": 100000},
        "ensemble": {"paths": 100000, "seed": 20240},
    },
    "merton": {
        "experiment": "merton",
        "grid": {"horizon": 1.0, "n_steps": 64},
        "coefficients": {"mu": 0.07, "rho": 0.02, "sigma": 0.25},
        "ensemble": {"paths": 2000, "seed": 11},
    },
    "after_default": {
        "experiment": "after_default",
        "grid": {"horizon": 1.0, "n_steps": 100},
        "coefficients": {"mu": {"pre": 0.09, "post": 0.03},
                         "sigma": {"pre": 0.3, "post": 0.2},
                         "rho": 0.01, "kappa": -0.4,
                         "theta": {"kind": "linear", "coef": {"pre": 0.1, "post": 0.05}}},
        "levy": {"kind": "atoms", "atoms": [[1.0, 0.5]]},
        "default_mechanism": {"kind": "after_default", "intensity": 0.12},
    },
    "anticipating_compensator": {
        "experiment": "anticipating_compensator",
        "grid": {"horizon": 2.0, "n_steps": 1000},
        "levy": {"kind": "atoms", "atoms": [[1.0, 1.0]]},
        "default_mechanism": {"kind": "window", "epsilon": 0.1, "threshold": 2},
        "ensemble": {"paths": 1400, "seed": 717},
    },
    "martingale_audit": {
        "experiment": "martingale_audit",
        "grid": {"horizon": 1.0, "n_steps": 100},
        "coefficients": {"mu": 0.08, "rho": 0.0, "sigma": 0.3, "kappa": -0.5},
        "default_mechanism": {"kind": "independent", "intensity": 0.1},
        "information_flow": {"kind": "full"},
        "utility": {"kind": "log"},
        "stopping": {"kind": "first_default"},
        "solver": {"shift": 0.0},
        "audit": {"times": [[0.2, 0.2], [0.5, 0.25]], "significance": 0.01,
                  "min_bucket": 200},
        "ensemble": {"paths": 100000, "seed": 31, "batch": 20000},
    },
    "partial_info": {
        "experiment": "partial_info",
        "coefficients": {"mu": 0.08, "rho": 0.02, "sigma": 0.3, "kappa": -0.5},
        "partial": {"intensity_low": 0.1, "intensity_high": 0.9, "prior_low": 0.5,
                    "observe_time": 1.0},
        "ensemble": {"paths": 40000, "seed": 5},
    },
    "empty_market": {
        "experiment": "empty_market",
        "grid": {"horizon": 1.0, "n_steps": 16},
        "coefficients": {"mu": 0.03, "rho": 0.03, "sigma": 0.0, "kappa": 0.0},
    },
}

_PRESET_BLURBS = {
    "figure1": "optimal fraction vs default intensity, uncompensated and compensated drift",
    "pathology": "sign-strategy divergence table: bounded integrands, growing expectations",
    "merton": "no-jump sanity: closed form vs bracketing solver plus wealth positivity",
    "after_default": "pre/post-default optimal fractions with a recovery regime",
    "anticipating_compensator": "state-conditional hazard rates under the window trigger",
    "martingale_audit": "conditional-increment test of the optimality criterion process",
    "partial_info": "hidden two-state intensity: bucketed posterior and quadratic optimum",
    "empty_market": "degenerate market: the optimal fraction column is identically zero",
}


def list_presets() -> list[tuple[str, str]]:
    """(name, one-line description) for every built-in preset."""
    return [(name, _PRESET_BLURBS[name]) for name in _PRESETS]


def preset_config(name: str) -> ExperimentConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset '{name}'; available: {sorted(_PRESETS)}", "preset")
    return validate_config(copy.deepcopy(_PRESETS[name]))
