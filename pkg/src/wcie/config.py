"""YAML run configuration.

Layout (every key optional)::

    exposure:
      covariates: [age, educ]
      knots: 4                 # interior knots of the exposure spline
      knot_strategy: percentile  # or equidistant
    outcome:
      covariates: [age, educ]
      first_visit: true        # indicator of the first outcome assessment
      weights: natural-cubic   # or piecewise
      weight_knots: 2          # interior knots, or intervals when piecewise
      weight_knots_aic: null   # [lo, hi] to select the count by AIC
    window: 24
    grid_step: 1
    bootstrap: 500
    level: 0.95
    seed: 0
    simulation:
      preset: main             # main, spacing4, missing20, error18
      n_subjects: 1000
      ...                      # any SimulationConfig field
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any

import yaml

from .pipeline import PipelineSettings
from .simulator import PRESETS, SimulationConfig

_WEIGHT_KINDS = {"natural-cubic": "natural-cubic", "piecewise": "piecewise", "piecewise-constant": "piecewise"}


class ConfigError(ValueError):
    pass


def load_config(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def _section(doc, name) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def _check_keys(sec: dict, allowed: set, where: str):
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def pipeline_settings(doc: dict, defaults: PipelineSettings | None = None, **overrides) -> PipelineSettings:
    """Merge defaults, config document and (non-``None``) command-line overrides."""
    base = defaults or PipelineSettings()
    _check_keys(doc, {"exposure", "outcome", "window", "grid_step", "bootstrap", "level", "seed", "simulation", "threads"}, "config")
    ex, out = _section(doc, "exposure"), _section(doc, "outcome")
    _check_keys(ex, {"covariates", "knots", "knot_strategy"}, "exposure")
    _check_keys(out, {"covariates", "first_visit", "weights", "weight_knots", "weight_knots_aic"}, "outcome")
    kind = out.get("weights", base.weight_kind)
    if kind not in _WEIGHT_KINDS:
        raise ConfigError(f"outcome.weights must be one of {', '.join(_WEIGHT_KINDS)}")
    values = dict(
        exposure_covariates=tuple(ex.get("covariates", base.exposure_covariates)),
        exposure_knots=int(ex.get("knots", base.exposure_knots)),
        exposure_knot_strategy=ex.get("knot_strategy", base.exposure_knot_strategy),
        outcome_covariates=tuple(out.get("covariates", base.outcome_covariates)),
        first_visit=bool(out.get("first_visit", base.first_visit)),
        weight_kind=_WEIGHT_KINDS[kind],
        weight_knots=int(out.get("weight_knots", base.weight_knots)),
        weight_knots_aic=out.get("weight_knots_aic", base.weight_knots_aic),
        window=float(doc.get("window", base.window)),
        grid_step=float(doc.get("grid_step", base.grid_step)),
        bootstrap=int(doc.get("bootstrap", base.bootstrap)),
        level=float(doc.get("level", base.level)),
        seed=int(doc.get("seed", base.seed)),
        workers=base.workers,
    )
    for k, v in overrides.items():
        if v is not None:
            values[k] = _WEIGHT_KINDS.get(v, v) if k == "weight_kind" else v
    if values["weight_knots_aic"] is not None:
        aic = values["weight_knots_aic"]
        if len(aic) != 2 or int(aic[0]) > int(aic[1]) or int(aic[0]) < 0:
            raise ConfigError("weight_knots_aic must be [lo, hi] with 0 <= lo <= hi")
    if values["exposure_knot_strategy"] not in ("percentile", "equidistant"):
        raise ConfigError("exposure.knot_strategy must be percentile or equidistant")
    try:
        return PipelineSettings(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def simulation_config(doc: dict, **overrides) -> SimulationConfig:
    sec = dict(_section(doc, "simulation"))
    name = sec.pop("preset", "main")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    _check_keys(sec, {f.name for f in fields(SimulationConfig)}, "simulation")
    values = {**PRESETS[name], **sec, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return SimulationConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
