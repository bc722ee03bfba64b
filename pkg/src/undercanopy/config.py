"""Experiment configuration: INI files mapped onto parameter dataclasses.

Each section of the file corresponds to one dataclass; keys are field names.
Command-line overrides (``section.key=value``) are applied after the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .forest import DriftModel, SensorModel
from .planner.mission import MissionParams
from .planner.scenario import MissionScenario, preset
from .planner.trajectory import PlannerParams
from .stems.pipeline import PipelineParams


class ConfigError(ValueError):
    """Unknown section or key, or a value that does not parse or validate."""


@dataclass(frozen=True)
class ForestConfig:
    density: float | None = None  # trees/ha; required by ``generate``
    extent: tuple[float, float] = (100.0, 100.0)  # width x depth, meters, anchored at the origin
    dbh_mean: float = 28.0
    dbh_sd: float = 8.0


@dataclass(frozen=True)
class ScanConfig:
    ground_returns: bool = True
    clutter_fraction: float = 0.02
    include_branches: bool = False


@dataclass(frozen=True)
class EvalConfig:
    match_distance: float = 0.5  # m, horizontal
    corridor: float = 5.0  # m, half-width of the completeness boundary around the flown path
    max_dt: float = 0.5  # s, state association window for ATE
    plots: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    seeds: str = "1"  # mission batches: "1-20" or "1,2,5"
    tls_mode: bool = False
    scenario: str = "evo-medium"


def pipeline_drift() -> DriftModel:
    """Default odometry error of the end-to-end run: 2% scale loss plus noise and drift."""
    return DriftModel(scale=0.98, noise_sigma=0.02, drift_rate=0.01)


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    scenario: MissionScenario = field(default_factory=MissionScenario)
    sensor: SensorModel = field(default_factory=SensorModel)
    scan: ScanConfig = field(default_factory=ScanConfig)
    drift: DriftModel = field(default_factory=pipeline_drift)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    planner: PlannerParams = field(default_factory=PlannerParams)
    mission: MissionParams = field(default_factory=MissionParams)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def effective_pipeline(self) -> PipelineParams:
        """Pipeline parameters with the TLS switch applied."""
        if self.run.tls_mode:
            return replace(self.pipeline, vertical_bin=0.20, use_temporal=False)
        return self.pipeline

    def effective_mission(self) -> MissionParams:
        """Mission parameters with the flight band taken from the scenario."""
        return replace(self.mission, floor_z=self.scenario.floor_z, ceiling_z=self.scenario.ceiling_z)

    def to_dict(self) -> dict:
        return {f.name: _section_dict(getattr(self, f.name)) for f in fields(self)}


# Fields that are derived elsewhere and therefore not settable from a file.
_HIDDEN = {
    "drift": {"seed"},
    "mission": {"floor_z", "ceiling_z"},
}


def _section_fields(name: str, obj) -> list[dataclasses.Field]:
    hidden = _HIDDEN.get(name, set())
    return [f for f in fields(obj) if f.name not in hidden]


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(text: str, annotation: Any, current: Any):
    """Convert ``text`` to the type of a dataclass field."""
    hint = _type_name(annotation)
    text = text.strip()
    optional = "None" in hint
    if optional and text.lower() in ("", "none"):
        return None
    if hint.startswith("bool"):
        return _parse_bool(text)
    if hint.startswith("int"):
        return int(text)
    if hint.startswith("float"):
        v = float(text)
        if not math.isfinite(v):
            raise ValueError(f"not a finite number: {text!r}")
        return v
    if hint.startswith("tuple"):
        parts = [p for p in text.replace("x", ",").replace(" ", ",").split(",") if p]
        vals = tuple(float(p) for p in parts)
        if current is not None and len(vals) != len(current):
            raise ValueError(f"expected {len(current)} values, got {len(vals)}")
        return vals
    return text


def _type_name(tp) -> str:
    if isinstance(tp, str):
        return tp
    if isinstance(tp, type):
        return tp.__name__
    return str(tp).replace("typing.", "")


def _hints(cls) -> dict:
    try:
        return {k: _type_name(v) for k, v in typing.get_type_hints(cls).items()}
    except Exception:
        return {f.name: _type_name(f.type) for f in fields(cls)}


def _apply(cfg: ExperimentConfig, section: str, values: dict[str, str]) -> ExperimentConfig:
    if section not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    allowed = {f.name: f for f in _section_fields(section, obj)}
    hints = _hints(type(obj))
    changes = {}
    for key, text in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            changes[key] = _parse_value(text, hints.get(key, allowed[key].type), getattr(obj, key))
        except ValueError as err:
            raise ConfigError(f"[{section}] {key}: {err}") from None
    try:
        new = replace(obj, **changes)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"[{section}] {err}") from None
    return replace(cfg, **{section: new})


def load_config(path=None, overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    """Defaults, then the INI file at ``path`` (if any), then ``overrides``.

    A ``scenario`` key in ``[run]`` selects a mission preset as the base of the
    ``[scenario]`` section before its own keys apply.
    """
    sections: list[tuple[str, dict[str, str]]] = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err.strerror}") from None
        except configparser.Error as err:
            raise ConfigError(f"malformed config file {path}: {err}") from None
        sections += [(s, dict(parser.items(s))) for s in parser.sections()]
    for s, vals in (overrides or {}).items():
        sections.append((s, dict(vals)))
    cfg = ExperimentConfig()
    for s, vals in sections:
        if s == "run":
            cfg = _apply(cfg, s, vals)
    try:
        cfg = replace(cfg, scenario=preset(cfg.run.scenario))
    except ValueError as err:
        raise ConfigError(str(err)) from None
    for s, vals in sections:
        if s != "run":
            cfg = _apply(cfg, s, vals)
    return cfg


def parse_assignments(items) -> dict[str, dict[str, str]]:
    """``["planner.v_max=0.8", ...]`` to ``{"planner": {"v_max": "0.8"}}``."""
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.setdefault(section, {})[name] = value
    return out


def merge_overrides(*parts: dict[str, dict[str, str]]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for p in parts:
        for s, vals in p.items():
            out.setdefault(s, {}).update(vals)
    return out


def write_config(cfg: ExperimentConfig, path) -> Path:
    """Write the settable fields of ``cfg`` as an INI file (reloads to the same config)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for f in fields(cfg):
        obj = getattr(cfg, f.name)
        parser[f.name] = {}
        for sf in _section_fields(f.name, obj):
            v = getattr(obj, sf.name)
            if isinstance(v, tuple):
                text = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = "none" if v is None else str(v)
            parser[f.name][sf.name] = text
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def parse_seeds(text: str) -> list[int]:
    """``"1-20"``, ``"3"`` or ``"1,4,9"`` (ranges inclusive) to a sorted unique seed list."""
    seeds: set[int] = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        lo, dash, hi = part.partition("-")
        try:
            if dash:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ValueError
                seeds.update(range(a, b + 1))
            else:
                seeds.add(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list {text!r}") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return sorted(seeds)
