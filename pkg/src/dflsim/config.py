"""Config file schema, validation, hashing, and RunConfig construction.

Configs are JSON.  Validation is strict: unknown keys are rejected so a
typo cannot silently fall back to a default.  The canonical-JSON hash of the
validated config is embedded in every output artifact, and a written
manifest is itself a loadable config, which is what makes re-runs
byte-reproducible.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import jsonschema

from . import channels as ch
from . import learners as ln
from . import topology as tp
from .engine import GraphSpec, RunConfig, Stopping

__all__ = [
    "CONFIG_SCHEMA",
    "BOUNDS_SCHEMA",
    "ConfigError",
    "canonical_json",
    "config_hash",
    "validate_config",
    "load_config",
    "build_run_config",
    "build_bound_kwargs",
]


class ConfigError(ValueError):
    """Invalid config file; message carries the JSON path or line/column."""


_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POSINT = {"type": "integer", "minimum": 1}

_PROBLEM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {
            "enum": ["quadratic", "isotropic_quadratic", "logistic", "mlp_softmax"]
        },
        "dim": _POSINT,
        "samples_per_device": _POSINT,
        "seed": {"type": "integer", "minimum": 0},
        "noise": _NONNEG,
        "target_scale": _NONNEG,
        "label_flip": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
        "hidden": _POSINT,
        "classes": {"type": "integer", "minimum": 2},
        "base_curvature": _POSITIVE,
        "stiff_curvature": _POSITIVE,
        "n_stiff": {"type": "integer", "minimum": 0},
        "centers_scale": _NONNEG,
        "centers_shared": {"type": "boolean"},
    },
}

_GRAPH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "n"],
    "properties": {
        "kind": {"enum": ["ring", "chain", "complete", "edge_list"]},
        "n": _POSINT,
        "edges": {
            "type": "array",
            "items": {
                "type": "array",
                "items": {"type": "integer", "minimum": 0},
                "minItems": 2,
                "maxItems": 2,
            },
        },
    },
}

_CHANNEL_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["digital"],
            "properties": {
                "digital": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["p"],
                    "properties": {
                        "p": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
                    },
                }
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["analog"],
            "properties": {
                "analog": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "noise_std": _NONNEG,
                        "noise_dbm": {"type": "number"},
                        "kappa": _POSITIVE,
                        "fading": {"enum": ["fixed", "rayleigh"]},
                        "tx_power": _POSITIVE,
                        "distance": _POSITIVE,
                        "gamma": _NONNEG,
                        "fade_floor": _POSITIVE,
                    },
                }
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["ideal"],
            "properties": {
                "ideal": {"type": "object", "additionalProperties": False}
            },
        },
    ]
}

_STOPPING_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["t"],
            "properties": {"t": _POSINT},
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["t_max"],
            "properties": {"t_max": _POSINT},
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["r1", "r2", "r_total"],
            "properties": {"r1": _POSITIVE, "r2": _POSITIVE, "r_total": _POSITIVE},
        },
    ]
}

_SCHEDULE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["eta"],
    "properties": {
        "eta": _NONNEG,
        "rule": {"enum": ["constant", "inverse_square", "inverse_three_halves"]},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "graph", "tau1", "tau2", "stopping", "schedule"],
    "properties": {
        "problem": _PROBLEM_SCHEMA,
        "graph": _GRAPH_SCHEMA,
        "scheme": {"enum": ["uniform_neighbor", "metropolis_hastings"]},
        "channel": _CHANNEL_SCHEMA,
        "tau1": _POSINT,
        "tau2": _POSINT,
        "stopping": _STOPPING_SCHEMA,
        "schedule": _SCHEDULE_SCHEMA,
        "seed": {"type": "integer", "minimum": 0},
        "repetitions": _POSINT,
        "clip": _POSITIVE,
        "init": {"enum": ["shared", "distinct"]},
        "init_scale": _NONNEG,
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "delta": _POSITIVE,
        "constants": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lipschitz": _POSITIVE, "grad_bound": _POSITIVE},
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["axis", "values"],
            "properties": {
                "axis": {
                    "enum": ["tau1", "tau2", "p", "noise_dbm", "n_devices", "topology", "eta"]
                },
                "values": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": ["number", "string"]},
                },
            },
        },
        "allocate": {
            "type": "object",
            "additionalProperties": False,
            "required": ["r1", "r2", "r_c"],
            "properties": {
                "r1": _POSITIVE,
                "r2": _POSITIVE,
                "r_c": _POSITIVE,
                "tau1_values": {"type": "array", "minItems": 1, "items": _POSINT},
                "tau2_values": {"type": "array", "minItems": 1, "items": _POSINT},
            },
        },
    },
}

BOUNDS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": [
        "lipschitz",
        "grad_bound",
        "eta",
        "tau1",
        "tau2",
        "rounds",
        "n_devices",
        "dim",
    ],
    "properties": {
        "lipschitz": _POSITIVE,
        "grad_bound": _POSITIVE,
        "eta": _NONNEG,
        "tau1": _POSINT,
        "tau2": _POSINT,
        "rounds": {"type": "integer", "minimum": 2},
        "n_devices": {"type": "integer", "minimum": 2},
        "dim": _POSINT,
        "p_correct": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "noise_scale": _NONNEG,
        "norm_w_init": _NONNEG,
        "norm_w_opt": _NONNEG,
        "mixing_frob2": _POSITIVE,
        "init_spread": _NONNEG,
        "delta": _POSITIVE,
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "beta_bar": {"type": "number", "minimum": 1},
    },
}


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON; the hashing pre-image."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode("utf-8")).hexdigest()


def validate_config(raw: dict, schema: dict | None = None) -> None:
    try:
        jsonschema.validate(raw, schema or CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "(top level)"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc


def load_config(path: str | Path, schema: dict | None = None) -> dict:
    """Parse, unwrap a manifest if given one, and validate.

    A manifest (the file simulate writes next to its outputs) nests the
    original config under a "config" key; feeding it back in re-runs the
    exact same experiment.
    """
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]
    validate_config(raw, schema)
    return raw


def _build_problem(raw: dict) -> ln.ProblemSpec:
    return ln.ProblemSpec(**raw)


def _build_graph(raw: dict) -> GraphSpec:
    edges = raw.get("edges")
    if raw["kind"] == "edge_list" and edges is None:
        raise ConfigError("edge_list graphs need an explicit edges array")
    return GraphSpec(
        kind=raw["kind"],
        n=raw["n"],
        edges=None if edges is None else tuple(tuple(e) for e in edges),
    )


def _build_channel(raw: dict | None):
    if raw is None or "ideal" in raw:
        return None
    if "digital" in raw:
        return ch.DigitalChannel(p_correct=raw["digital"]["p"])
    spec = dict(raw["analog"])
    if ("noise_std" in spec) == ("noise_dbm" in spec):
        raise ConfigError("analog channel needs exactly one of noise_std or noise_dbm")
    if "noise_dbm" in spec:
        spec["noise_std"] = ch.sigma_n_from_dbm(spec.pop("noise_dbm"))
    if "fading" in spec:
        spec["fading"] = ch.Fading(spec["fading"])
    return ch.AnalogChannel(**spec)


def _build_stopping(raw: dict) -> Stopping:
    return Stopping(
        t=raw.get("t"),
        t_max=raw.get("t_max"),
        r1=raw.get("r1"),
        r2=raw.get("r2"),
        r_total=raw.get("r_total"),
    )


def build_run_config(raw: dict, seed_override: int | None = None, reps_override: int | None = None) -> RunConfig:
    """Turn a validated config dict into an executable RunConfig."""
    schedule = ln.LearningSchedule(
        eta0=raw["schedule"]["eta"],
        rule=ln.ScheduleRule(raw["schedule"].get("rule", "constant")),
    )
    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    reps = reps_override if reps_override is not None else raw.get("repetitions", 1)
    return RunConfig(
        problem=_build_problem(raw["problem"]),
        graph=_build_graph(raw["graph"]),
        tau1=raw["tau1"],
        tau2=raw["tau2"],
        stopping=_build_stopping(raw["stopping"]),
        schedule=schedule,
        seed=seed,
        scheme=tp.MixingScheme(raw.get("scheme", "metropolis_hastings")),
        channel=_build_channel(raw.get("channel")),
        repetitions=reps,
        clip=raw.get("clip"),
        init=raw.get("init", "shared"),
        init_scale=raw.get("init_scale", 1.0),
        epsilon=raw.get("epsilon", 0.5),
        delta=raw.get("delta", 1.0),
    )


def build_bound_kwargs(raw: dict) -> dict:
    """Validated bounds file to keyword arguments for BoundInputs."""
    validate_config(raw, BOUNDS_SCHEMA)
    return dict(raw)
