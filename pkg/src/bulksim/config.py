"""Scenario configuration: a single YAML file describing the pile, machine,
planners, and run parameters. Parsing is strict (unknown keys rejected) and
round-trips exactly through serialize/parse.
"""

import dataclasses
from typing import Optional

import yaml

from . import machine as mch
from . import orchestrator as orch
from . import soilfield as sf
from . import worldmap as wm


class ScenarioError(ValueError):
    """Malformed scenario file; message carries the offending section/key."""


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ScenarioError(f"section '{section}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(
            f"section '{section}': unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: _tupleize(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"section '{section}': {exc}") from exc


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    return value


_NESTED = {
    "pile": sf.PileSpec,
    "noise": sf.NoiseModel,
    "geometry": sf.GripperGeometry,
    "params": mch.MachineParams,
}


def scenario_to_dict(scenario: orch.ScenarioConfig) -> dict:
    out = {}
    for f in dataclasses.fields(orch.ScenarioConfig):
        v = getattr(scenario, f.name)
        if f.name == "obstacles":
            out[f.name] = [{"min_corner": list(b.min_corner),
                            "max_corner": list(b.max_corner)} for b in v]
        else:
            out[f.name] = _plain(v)
    return out


def scenario_from_dict(data: dict) -> orch.ScenarioConfig:
    if not isinstance(data, dict):
        raise ScenarioError("scenario root must be a mapping")
    names = {f.name for f in dataclasses.fields(orch.ScenarioConfig)}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, key)
        elif key == "obstacles":
            boxes = []
            for i, b in enumerate(value or []):
                boxes.append(_build(wm.Box, b, f"obstacles[{i}]"))
            kwargs[key] = tuple(boxes)
        else:
            kwargs[key] = _tupleize(value)
    try:
        return orch.ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path) -> orch.ScenarioConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if data is None:
        data = {}
    return scenario_from_dict(data)


def save_scenario(scenario: orch.ScenarioConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(scenario_to_dict(scenario), f, sort_keys=False)
