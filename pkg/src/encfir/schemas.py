"""JSON schemas for every file the command line reads or writes."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

_MATRIX = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_INT_STR = {"type": ["string", "integer"], "pattern": "^[0-9]+$"}

MODEL_SCHEMA = {
    "type": "object",
    "required": ["a", "b", "c", "d", "x0", "dt"],
    "properties": {
        "a": _MATRIX, "b": _MATRIX, "c": _MATRIX, "d": _MATRIX,
        "x0": {"type": "array", "items": {"type": "number"}},
        "dt": {"type": "number", "exclusiveMinimum": 0},
    },
}

FILTER_SCHEMA = {
    "type": "object",
    "required": ["order", "taps"],
    "properties": {
        "order": {"type": "integer", "minimum": 0},
        "taps": {"type": "array", "minItems": 1, "items": _MATRIX},
    },
}

PROFILE_SCHEMA = {
    "type": "object",
    "required": [f"s{i}" for i in range(8)] + ["q"],
    "properties": {**{f"s{i}": {"type": "number", "minimum": 1} for i in range(8)}, "q": _INT_STR},
}

HE_PARAMS_SCHEMA = {
    "type": "object",
    "required": ["ring_dim", "q_c", "t", "sigma", "base", "levels"],
    "properties": {
        "ring_dim": {"type": "integer", "minimum": 2},
        "q_c": _INT_STR,
        "t": _INT_STR,
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "base": {"type": "integer", "minimum": 2},
        "levels": {"type": "integer", "minimum": 1},
    },
}

_POLY = {"type": "array", "items": {"type": "integer", "minimum": 0}}

KEYS_SCHEMA = {
    "type": "object",
    "required": ["notice", "params", "public", "relin"],
    "properties": {
        "notice": {"type": "string"},
        "params": HE_PARAMS_SCHEMA,
        "public": {"type": "array", "minItems": 2, "maxItems": 2, "items": _POLY},
        "relin": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": _POLY}},
        "secret": {"type": "array", "items": {"type": "integer", "minimum": -1, "maximum": 1}},
        "seed": {"type": "integer"},
    },
}

# a model or filter reference: inline object, {"builtin": name} or a path
_REF = {"oneOf": [{"type": "string"}, {"type": "object"}]}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["plant", "controller", "steps"],
    "properties": {
        "plant": _REF,
        "x0": {"type": "array", "items": {"type": "number"}},
        "steps": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "timeout": {"type": "number", "exclusiveMinimum": 0},
        "refresh_timeout": {"type": "number", "exclusiveMinimum": 0},
        "transport": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["inproc", "socket"]},
                "host": {"type": "string"},
                "port": {"type": "integer", "minimum": 0, "maximum": 65535},
            },
        },
        "controller": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["zero", "iir", "reset", "integer-iir", "fir", "encrypted-fir", "refresh"]},
                "model": _REF,
                "filter": _REF,
                "period": {"type": "integer", "minimum": 1},
                "profile": PROFILE_SCHEMA,
                "encryption": {
                    "type": "object",
                    "properties": {
                        "backend": {"enum": ["bfv", "mock"]},
                        "mode": {"enum": ["partial", "full"]},
                        "s6": {"type": "number", "minimum": 1},
                        "s7": {"type": "number", "minimum": 1},
                        "y_max": {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                                            {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}]},
                        "headroom": {"enum": ["product", "exact"]},
                        "precompute": {"type": "boolean"},
                        "strict": {"type": "boolean"},
                        "params": HE_PARAMS_SCHEMA,
                    },
                    "additionalProperties": False,
                },
            },
        },
        "drop": {
            "type": "object",
            "properties": {
                "types": {"type": "array", "items": {"enum": [
                    "HELLO", "PARAMS", "SENSOR_DATA", "CONTROL_ACTION",
                    "STATE_REFRESH_DOWN", "STATE_REFRESH_UP", "BYE"]}},
                "probability": {"type": "number", "minimum": 0, "maximum": 1},
                "after": {"type": "integer", "minimum": 0},
                "delay": {"type": "number", "minimum": 0},
            },
        },
        "keys": {"type": "string"},
        "output_dir": {"type": "string"},
    },
}

#: run configuration: a scenario plus the key file and output directory
CONFIG_SCHEMA = SCENARIO_SCHEMA

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["kind", "steps", "final_norm", "decay_step", "flags"],
    "properties": {
        "kind": {"type": "string"},
        "steps": {"type": "integer"},
        "final_norm": {"type": "number"},
        "decay_step": {"type": ["integer", "null"]},
        "flags": {"type": "object"},
        "latency": {"type": "object"},
    },
}


class SchemaError(ValueError):
    """A document does not match its schema."""


def validate(obj, schema: dict, what: str = "document") -> None:
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise SchemaError(f"{what}: {exc.message} (at {where})") from exc


def load_json(path, schema: dict | None = None, what: str | None = None):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if schema is not None:
        validate(obj, schema, what or str(path))
    return obj
