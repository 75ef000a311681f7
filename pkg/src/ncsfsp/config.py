"""Run configuration: one versioned JSON document, schema-checked before use."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .compensator import MODES, PrimaryController
from .discretize import ContinuousPlant, cacc_plant
from .sim import ScenarioConfig
from .timing import TimingConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed document: bad JSON, schema violation or inconsistent sizes."""


_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_vector = {"type": "array", "items": {"type": "number"}}

_dist = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["constant", "uniform", "truncated-inverse-gaussian"]},
        "value": {"type": "number", "minimum": 0},
        "min": {"type": "number", "minimum": 0},
        "max": {"type": "number", "minimum": 0},
        "mu": {"type": "number"},
        "sigma": {"type": "number"},
    },
}
_stage = {"oneOf": [_dist, {"type": "array", "items": _dist, "minItems": 1}]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "plant", "timing", "controller", "compensator", "scenario"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "notes": {"type": "array", "items": {"type": "string"}},
        "plant": {
            "oneOf": [
                {"type": "object", "additionalProperties": False,
                 "required": ["template", "tau", "headway"],
                 "properties": {"template": {"const": "cacc"},
                                "tau": {"type": "number", "exclusiveMinimum": 0},
                                "headway": {"type": "number", "exclusiveMinimum": 0}}},
                {"type": "object", "additionalProperties": False,
                 "required": ["A", "B"],
                 "properties": {"A": _matrix, "B": _matrix, "Bw": _matrix}},
            ]
        },
        "timing": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sampling_period", "num_sensors", "num_actuators", "offset", "jitter",
                         "sensing_delay", "sensing_message_delay", "control_delay",
                         "actuation_message_delay", "actuation_delay"],
            "properties": {
                "sampling_period": {"type": "number", "exclusiveMinimum": 0},
                "num_sensors": {"type": "integer", "minimum": 1},
                "num_actuators": {"type": "integer", "minimum": 1},
                "offset": _stage, "jitter": _stage, "sensing_delay": _stage,
                "sensing_message_delay": _stage, "control_delay": _dist,
                "actuation_message_delay": _stage, "actuation_delay": _stage,
            },
        },
        "controller": {
            "type": "object",
            "additionalProperties": False,
            "required": ["Ac", "Bc", "Br"],
            "properties": {
                "Ac": _matrix, "Bc": _matrix, "Br": _matrix,
                "gains": {"type": "object", "additionalProperties": False,
                          "required": ["Kc", "Kx"], "properties": {"Kc": _matrix, "Kx": _matrix}},
                "lqr": {"type": "object", "additionalProperties": False,
                        "required": ["Q", "R"],
                        "properties": {"Q": {"oneOf": [_matrix, {"type": "number"}]},
                                       "R": {"oneOf": [_matrix, {"type": "number"}]}}},
            },
            "oneOf": [{"required": ["gains"]}, {"required": ["lqr"]}],
        },
        "compensator": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode"],
            "properties": {
                "mode": {"enum": list(MODES)},
                "alpha": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "orders": {"type": "array",
                           "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                     "minItems": 2, "maxItems": 2}},
                "extra_targets": {"type": "array", "items": {"type": "number"}},
                "model_samples": {"type": "integer", "minimum": 1},
                "free_coefficients": {"enum": ["min-norm", "h2"]},
                "fsp": {"type": "object", "additionalProperties": False,
                        "required": ["delay_steps"],
                        "properties": {
                            "delay_steps": {"type": "integer", "minimum": 0},
                            "alpha": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                            "orders": {"type": "array",
                                       "items": {"type": "array",
                                                 "items": {"type": "integer", "minimum": 0},
                                                 "minItems": 2, "maxItems": 2}}}},
            },
        },
        "stability": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 100},
                "memory_budget_gb": {"type": "number", "exclusiveMinimum": 0},
                "eigenvalues": {"type": "integer", "minimum": 1},
            },
        },
        "scenario": {
            "type": "object",
            "additionalProperties": False,
            "required": ["horizon"],
            "properties": {
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "reference_time": {"type": "number", "minimum": 0},
                "reference_amplitude": _vector,
                "disturbance_time": {"type": "number", "minimum": 0},
                "disturbance_amplitude": _vector,
                "replicas": {"type": "integer", "minimum": 1},
                "warmup_steps": {"type": "integer", "minimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["json", "csv", "svg"]}},
                "trajectory_replicas": {"type": "integer", "minimum": 0},
            },
        },
    },
}


@dataclass
class CompensatorConfig:
    mode: str = "3sfsp"
    alpha: float = 0.4
    orders: list | None = None
    extra_targets: list = field(default_factory=list)
    model_samples: int = 10_000
    free_coefficients: str = "min-norm"
    fsp_delay_steps: int | None = None
    fsp_alpha: float | None = None
    fsp_orders: list | None = None


@dataclass
class OutputConfig:
    directory: str = "out"
    formats: tuple = ("json", "csv", "svg")
    trajectory_replicas: int = 20


@dataclass
class RunConfig:
    raw: dict
    plant: ContinuousPlant
    timing: TimingConfig
    controller: dict
    compensator: CompensatorConfig
    scenario: ScenarioConfig
    output: OutputConfig
    seed: int = 0
    stability_samples: int = 10_000
    memory_budget: int = 2 * 1024 ** 3
    n_eigenvalues: int = 64
    name: str = "run"
    source: str | None = None

    @property
    def assumptions(self) -> list[str]:
        """Modeling choices worth echoing in every report."""
        out = list(self.raw.get("notes", []))
        p = self.raw["plant"]
        if p.get("template") == "cacc":
            out.insert(0, f"CACC plant with engine time constant tau = {p['tau']} s "
                          f"and headway h = {p['headway']} s")
        return out

    def with_overrides(self, seed=None, replicas=None, mode=None) -> RunConfig:
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = int(seed)
        if replicas is not None:
            raw["scenario"]["replicas"] = int(replicas)
        if mode is not None:
            raw["compensator"]["mode"] = mode
        return parse_config(raw, self.source)


def _schema_message(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def parse_config(raw: dict, source: str | None = None) -> RunConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(_schema_message(e) for e in errors[:5]))
    try:
        return _build(raw, source)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _build(raw: dict, source) -> RunConfig:
    p = raw["plant"]
    if "template" in p:
        plant = cacc_plant(p["tau"], p["headway"])
    else:
        A = np.asarray(p["A"], dtype=float)
        plant = ContinuousPlant(A, p["B"], p.get("Bw", np.zeros((A.shape[0], 1))))
    timing = TimingConfig.from_dict(raw["timing"])
    c = raw["compensator"]
    fsp = c.get("fsp", {})
    comp = CompensatorConfig(
        mode=c["mode"], alpha=float(c.get("alpha", 0.4)),
        orders=[tuple(o) for o in c["orders"]] if "orders" in c else None,
        extra_targets=[float(v) for v in c.get("extra_targets", [])],
        model_samples=int(c.get("model_samples", 10_000)),
        free_coefficients=c.get("free_coefficients", "min-norm"),
        fsp_delay_steps=fsp.get("delay_steps"), fsp_alpha=fsp.get("alpha"),
        fsp_orders=[tuple(o) for o in fsp["orders"]] if "orders" in fsp else None)
    if comp.orders is not None and len(comp.orders) != plant.n:
        raise ValueError(f"compensator/orders: need {plant.n} filter entries, got {len(comp.orders)}")
    seed = int(raw.get("seed", 0))
    sc = dict(raw["scenario"])
    sc["seed"] = seed
    scenario = ScenarioConfig.from_dict(sc)
    o = raw.get("output", {})
    out = OutputConfig(o.get("directory", "out"), tuple(o.get("formats", ("json", "csv", "svg"))),
                       int(o.get("trajectory_replicas", 20)))
    st = raw.get("stability", {})
    ctrl = raw["controller"]
    n = plant.n
    for key, rows in (("Bc", None), ("Br", n)):
        m = np.asarray(ctrl[key], dtype=float)
        if rows is not None and m.shape[0] != rows:
            raise ValueError(f"controller/{key}: expected {rows} rows, got {m.shape[0]}")
    if np.asarray(ctrl["Bc"], dtype=float).size and np.asarray(ctrl["Bc"]).shape[1] != n:
        raise ValueError(f"controller/Bc: expected {n} columns")
    if timing.num_actuators != plant.n_inputs:
        raise ValueError(f"timing/num_actuators is {timing.num_actuators}, plant has {plant.n_inputs} inputs")
    if timing.num_sensors != n:
        raise ValueError(f"timing/num_sensors is {timing.num_sensors}; full-state measurement needs {n}")
    return RunConfig(raw, plant, timing, ctrl, comp, scenario, out, seed,
                     int(st.get("samples", 10_000)),
                     int(float(st.get("memory_budget_gb", 2.0)) * 1024 ** 3),
                     int(st.get("eigenvalues", 64)), raw.get("name", Path(source).stem if source else "run"),
                     source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(raw, str(path))


def controller_from_config(ctrl: dict) -> PrimaryController:
    """Explicit gains only; LQR gains are computed by the design step."""
    g = ctrl["gains"]
    return PrimaryController(ctrl["Ac"], ctrl["Bc"], g["Kc"], g["Kx"], ctrl["Br"])
