"""Run configuration: one nested YAML file, merged over defaults, snapshotted with every output."""

from __future__ import annotations

import copy
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import yaml

from .baselines import AnnealingConfig
from .calibrator import TrainingConfig
from .data import ScenarioSpec, default_geometry
from .domain import FreewayGeometry, ParamBounds
from .smooth import SmoothingConfig

SNAPSHOT_NAME = "config.snapshot.yaml"


class ConfigError(ValueError):
    pass


def _scenario_defaults() -> dict[str, Any]:
    out = {}
    for f in fields(ScenarioSpec):
        if f.name in ("geometry", "bounds"):
            continue
        v = f.default
        out[f.name] = list(v) if isinstance(v, tuple) else v
    out["periods"] = 250
    out["train_fraction"] = 0.8
    return out


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def defaults() -> dict[str, Any]:
    training = TrainingConfig().to_dict()
    return _plain({
        "seed": 0,
        "geometry": {"cells": 9, "sim_step_s": 5.0, "obs_interval_min": 5.0, "period_hours": 3.0,
                     "buffer_capacity": 2400.0, "cell_lengths": None},
        "bounds": {"free_flow_speed": [60.0, 130.0], "nominal_capacity": [1500.0, 2600.0],
                   "drop_ratio": [0.7, 1.0], "jam_density": [100.0, 220.0], "wave_speed": [8.0, 40.0]},
        "scenario": _scenario_defaults(),
        "training": training,
        "annealing": asdict(AnnealingConfig()),
        "simulation": {"mode": "consistent"},
        "sensitivity": {"rates": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5], "seeds": 5},
    })


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(base[k], dict) and not (k == "smoothing" and v is None):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{key}' must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_text(text: str, source: str = "<config>") -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"{source}:{where}: {problem}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data


def apply_override(cfg: dict, assignment: str) -> dict:
    """``section.key=value`` with ``value`` parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, raw = assignment.split("=", 1)
    value = parse_text(f"v: {raw}", f"override {key}")["v"]
    nested: Any = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return _merge(cfg, nested)


def load(path: str | Path | None = None, overrides=()) -> dict:
    cfg = defaults()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
        cfg = _merge(cfg, parse_text(text, str(p)))
    for o in overrides:
        cfg = apply_override(cfg, o)
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)


def snapshot(cfg: dict, out_dir: str | Path) -> Path:
    p = Path(out_dir) / SNAPSHOT_NAME
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dump(cfg), encoding="utf-8")
    return p


# -- typed views -------------------------------------------------------------------

def _wrap(fn, section):
    try:
        return fn()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from None


def geometry(cfg: dict) -> FreewayGeometry:
    g = cfg["geometry"]
    return _wrap(lambda: default_geometry(int(g["cells"]), float(g["sim_step_s"]), float(g["obs_interval_min"]),
                                          float(g["period_hours"]), float(g["buffer_capacity"]), g["cell_lengths"]),
                 "geometry")


def bounds(cfg: dict, K: int) -> ParamBounds:
    b = cfg["bounds"]
    return _wrap(lambda: ParamBounds.uniform(K, **{k: tuple(v) for k, v in b.items()}), "bounds")


def scenario(cfg: dict, g: FreewayGeometry, b: ParamBounds) -> tuple[ScenarioSpec, float]:
    s = dict(cfg["scenario"])
    frac = float(s.pop("train_fraction"))
    if not 0.0 < frac <= 1.0:
        raise ConfigError("scenario.train_fraction must lie in (0, 1]")
    s = {k: tuple(v) if isinstance(v, list) else v for k, v in s.items()}
    return _wrap(lambda: ScenarioSpec(g, b, **s), "scenario"), frac


def training(cfg: dict) -> TrainingConfig:
    return _wrap(lambda: TrainingConfig.from_dict(cfg["training"]), "training")


def annealing(cfg: dict) -> AnnealingConfig:
    a = dict(cfg["annealing"])
    if isinstance(a.get("step_scale"), list):
        a["step_scale"] = tuple(a["step_scale"])
    return _wrap(lambda: AnnealingConfig(**a), "annealing")


def smoothing(cfg: dict) -> SmoothingConfig:
    return training(cfg).smoothing
