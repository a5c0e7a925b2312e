"""Scenario files: JSON schema, loading, and conversion to runtime objects."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .devices import UnifiedMemory, default_profiles
from .errors import ConfigError
from .power import PowerManager, RateRange
from .toy_model import STAGE_NAMES, STAGE_PRECISIONS, make_spec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EVENT_KINDS = ("camera_frame", "wake_word", "text_prompt")
LOG_ENV = "NANOMIND_RT_LOG"

_range = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_profile = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "throughput": {"type": "object", "additionalProperties": {"type": "number", "exclusiveMinimum": 0}},
        "mem_bandwidth": {"type": "number", "exclusiveMinimum": 0},
        "active_power": {"type": "number", "minimum": 0},
        "idle_power": {"type": "number", "minimum": 0},
        "supports_dynamic_shapes": {"type": "boolean"},
        "mem_capacity": {"type": ["integer", "null"], "minimum": 0},
        "recompile_cost": {"type": "number", "minimum": 0},
    },
}
_stage = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "precision": {"enum": list(STAGE_PRECISIONS)},
        "group_size": {"type": "integer", "minimum": 1},
        "dims": {"type": "object"},
        "cost_dims": {"type": "object"},
        "declared_cost": {"type": "object"},
    },
}
_stages = {"type": "object", "additionalProperties": False,
           "properties": {n: _stage for n in STAGE_NAMES}}
_event = {
    "type": "object",
    "additionalProperties": False,
    "required": ["at", "kind"],
    "properties": {
        "at": {"type": "number", "minimum": 0},
        "kind": {"enum": list(EVENT_KINDS)},
        "payload": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "prompt": {"type": "string"},
                "utterance": {"type": "string"},
                "image_seed": {"type": "integer", "minimum": 0},
                "frames": {"type": "integer", "minimum": 1},
            },
        },
    },
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "seed"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "devices": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "available": {"type": "array", "items": {"enum": ["CPU", "GPU", "NPU"]},
                              "minItems": 1, "uniqueItems": True},
                "profiles": {"type": "object", "additionalProperties": False,
                             "properties": {k: _profile for k in ("CPU", "GPU", "NPU")}},
            },
        },
        "memory": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "capacity_bytes": {"type": "integer", "minimum": 1},
                "storage_bandwidth": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "power": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "capacity_mah": {"type": "number", "exclusiveMinimum": 0},
                "nominal_voltage": {"type": "number", "exclusiveMinimum": 0},
                "battery_percent": {"type": "number", "minimum": 0, "maximum": 100},
                "t_high": {"type": "number", "minimum": 0, "maximum": 100},
                "t_low": {"type": "number", "minimum": 0, "maximum": 100},
                "hysteresis": {"type": "number", "minimum": 0},
                "camera_fps": _range,
                "mem_clock_scale": _range,
            },
        },
        "stages": _stages,
        "stages_manifest": {"type": "string"},
        "trace": {"type": "array", "items": _event},
        "trace_path": {"type": "string"},
        "placement": {"type": "string", "pattern": "^(auto|monolithic:(CPU|GPU|NPU)|file:.+)$"},
        "pipeline": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["auto", "parallel", "cascade"]},
                "tokens_per_batch": {"type": "integer", "minimum": 1},
                "n_slots": {"type": "integer", "minimum": 2},
                "new_tokens": {"type": "integer", "minimum": 1},
                "latency_target": {"type": "number", "exclusiveMinimum": 0},
                "staging_bytes_per_layer": {"type": "integer", "minimum": 0},
                "horizon_s": {"type": "number", "minimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "figures": {"type": "boolean"}},
        },
    },
}

PIPELINE_DEFAULTS = {
    "mode": "auto",
    "tokens_per_batch": 4,
    "n_slots": 4,
    "new_tokens": 8,
    "latency_target": None,
    "staging_bytes_per_layer": 0,
    "horizon_s": None,
}
POWER_DEFAULTS = {
    "capacity_mah": 2000.0,
    "nominal_voltage": 3.9,
    "battery_percent": 100.0,
    "t_high": 80.0,
    "t_low": 20.0,
    "hysteresis": 0.0,
    "camera_fps": [1.0, 30.0],
    "mem_clock_scale": [0.25, 1.0],
}
MEMORY_DEFAULTS = {"capacity_bytes": 4 * 1024**3, "storage_bandwidth": 1.0e9}


@dataclass(frozen=True)
class Event:
    at: float
    kind: str
    payload: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"at": self.at, "kind": self.kind, "payload": dict(sorted(self.payload.items()))}


@dataclass
class ScenarioConfig:
    """A validated scenario with every default filled in."""

    raw: dict
    seed: int
    base_dir: Path
    devices: dict = field(default_factory=dict)
    memory: dict = field(default_factory=dict)
    power: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    placement: str = "auto"
    pipeline: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def build_specs(self) -> list:
        return [make_spec(name, s.get("dims"), s.get("precision"), s.get("group_size", 32),
                          s.get("cost_dims"), s.get("declared_cost"))
                for name, s in ((n, self.stages.get(n, {})) for n in STAGE_NAMES)]

    def build_devices(self) -> dict:
        profiles = default_profiles(self.devices.get("profiles"))
        avail = self.devices.get("available", ["CPU", "GPU", "NPU"])
        if "CPU" not in avail:
            raise ConfigError("devices.available must include CPU (it hosts standby and fallback)")
        return {k: v for k, v in profiles.items() if str(k) in avail}

    def build_memory(self) -> UnifiedMemory:
        return UnifiedMemory(int(self.memory["capacity_bytes"]))

    def build_power(self) -> PowerManager:
        p = self.power
        if not p["t_low"] < p["t_high"]:
            raise ConfigError("power.t_low must be below power.t_high")
        return PowerManager.from_mah(p["capacity_mah"], p["nominal_voltage"], p["battery_percent"],
                                     t_high=p["t_high"], t_low=p["t_low"], hysteresis=p["hysteresis"])

    def build_rates(self) -> dict:
        return {k: RateRange(*self.power[k]) for k in ("camera_fps", "mem_clock_scale")}

    def events(self) -> list:
        return [Event(float(e["at"]), e["kind"], dict(e.get("payload", {}))) for e in self.trace]


def _parse_json(text: str, source: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: malformed JSON: {e.msg}") from e


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from e


def _check_version(raw, source: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: scenario must be a JSON object")
    if "version" not in raw:
        raise ConfigError(f'{source}: missing "version"; scenario files for this release declare '
                          f'"version": {SCHEMA_VERSION}')
    v = raw["version"]
    if v != SCHEMA_VERSION:
        raise ConfigError(
            f"{source}: scenario schema version {v!r} is not supported; this release reads "
            f"version {SCHEMA_VERSION}. Migrate by setting \"version\": {SCHEMA_VERSION} and "
            f"checking the keys against `nanomind validate-config`."
        )


def validate_raw(raw, source: str = "<scenario>") -> None:
    _check_version(raw, source)
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "(root)"
            lines.append(f"{where}: {e.message}")
        raise ConfigError(f"{source}: invalid scenario:\n  " + "\n  ".join(lines))


def _load_trace(path: Path) -> list:
    if path.suffix == ".json":
        data = _parse_json(_read(path), str(path))
        jsonschema.validate(data, {"type": "array", "items": _event})
        return data
    import csv

    rows = []
    with path.open(newline="") as f:
        for line, rec in enumerate(csv.DictReader(f), start=2):
            try:
                payload = json.loads(rec["payload"]) if rec.get("payload") else {}
                rows.append({"at": float(rec["at"]), "kind": rec["kind"], "payload": payload})
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"{path}:{line}: bad trace row: {e}") from e
    jsonschema.validate(rows, {"type": "array", "items": _event})
    return rows


def from_dict(raw: dict, base_dir=".", source: str = "<scenario>") -> ScenarioConfig:
    validate_raw(raw, source)
    raw = copy.deepcopy(raw)
    base = Path(base_dir)
    stages = {}
    if "stages_manifest" in raw:
        mpath = base / raw["stages_manifest"]
        manifest = _parse_json(_read(mpath), str(mpath))
        try:
            jsonschema.validate(manifest, _stages)
        except jsonschema.ValidationError as e:
            raise ConfigError(f"{mpath}: invalid stage manifest: {e.message}") from e
        stages.update(manifest)
    for name, s in raw.get("stages", {}).items():
        stages[name] = {**stages.get(name, {}), **s}
    trace = list(raw.get("trace", []))
    if "trace_path" in raw:
        try:
            trace += _load_trace(base / raw["trace_path"])
        except jsonschema.ValidationError as e:
            raise ConfigError(f"{raw['trace_path']}: invalid trace: {e.message}") from e
    if any(b["at"] < a["at"] for a, b in zip(trace, trace[1:])):
        raise ConfigError("trace events must be sorted by timestamp")
    power = {**POWER_DEFAULTS, **raw.get("power", {})}
    if not power["t_low"] < power["t_high"]:
        raise ConfigError("power.t_low must be below power.t_high")
    for key in ("camera_fps", "mem_clock_scale"):
        lo, hi = power[key]
        if not 0 < lo <= hi:
            raise ConfigError(f"power.{key} must satisfy 0 < min <= max")
    if power["mem_clock_scale"][1] > 1:
        raise ConfigError("power.mem_clock_scale cannot exceed 1")
    return ScenarioConfig(
        raw=raw,
        seed=raw["seed"],
        base_dir=base,
        devices=raw.get("devices", {}),
        memory={**MEMORY_DEFAULTS, **raw.get("memory", {})},
        power=power,
        stages=stages,
        trace=trace,
        placement=raw.get("placement", "auto"),
        pipeline={**PIPELINE_DEFAULTS, **raw.get("pipeline", {})},
        output=raw.get("output", {}),
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    raw = _parse_json(_read(path), str(path))
    return from_dict(raw, path.parent, str(path))


def default_scenario_path() -> Path:
    return Path(str(resources.files("nanomind") / "data" / "default_scenario.json"))


def load_default() -> ScenarioConfig:
    return load_config(default_scenario_path())


def configure_logging(default: str = "WARNING") -> None:
    level = os.environ.get(LOG_ENV, default).upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"{LOG_ENV}={level!r} is not a logging level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
