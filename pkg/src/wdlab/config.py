"""JSON experiment configs: schemas, validation with field paths, and hashing."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from jsonschema import Draft202012Validator

from .errors import ConfigError

POS_INT = {"type": "integer", "minimum": 1}
NONNEG_INT = {"type": "integer", "minimum": 0}
POS_NUM = {"type": "number", "exclusiveMinimum": 0}
NONNEG_NUM = {"type": "number", "minimum": 0}
SEED = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


ARCH = _obj(
    {
        "d": POS_INT,
        "widths": {"type": "array", "items": POS_INT},
        "activation": {"enum": ["identity", "relu", "relu_power"]},
        "H": POS_INT,
    },
    ("d",),
)

DATA = {
    "oneOf": [
        _obj(
            {
                "source": {"const": "synthetic"},
                "n": POS_INT,
                "subspace": {"type": "array", "items": NONNEG_INT, "minItems": 1},
                "label_freq": POS_NUM,
            },
            ("source", "n"),
        ),
        _obj({"source": {"const": "clusters"}, "n": POS_INT, "noise": NONNEG_NUM}, ("source", "n")),
        _obj({"source": {"const": "csv"}, "path": {"type": "string"}}, ("source", "path")),
        _obj(
            {
                "source": {"const": "idx"},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "n": POS_INT,
                "offset": NONNEG_INT,
            },
            ("source", "images", "labels"),
        ),
    ]
}

TRAIN = _obj(
    {
        "eta": POS_NUM,
        "lam": NONNEG_NUM,
        "steps": NONNEG_INT,
        "checkpoint_every": POS_INT,
        "init": {"enum": ["xavier", "scaled_gaussian", "zeros", "balanced_rank1"]},
        "init_scale": POS_NUM,
        "batch_size": POS_INT,
    },
    ("eta", "lam", "steps"),
)

COMMON = {"seed": SEED, "out": {"type": "string"}}

SCHEMAS = {
    "train": _obj({**COMMON, "arch": ARCH, "data": DATA, "train": TRAIN}, ("arch", "data", "train")),
    "polish": _obj(
        {
            **COMMON,
            "arch": ARCH,
            "data": DATA,
            "train": TRAIN,
            "polish": _obj({"tol": POS_NUM, "max_iter": POS_INT, "kink_delta": POS_NUM}, ("tol",)),
        },
        ("arch", "data", "train", "polish"),
    ),
    "gf": _obj(
        {
            **COMMON,
            "arch": ARCH,
            "data": DATA,
            "gf": _obj(
                {
                    "lam": NONNEG_NUM,
                    "T": POS_NUM,
                    "h": POS_NUM,
                    "mode": {"enum": ["per_layer", "end_to_end"]},
                    "record_every": POS_INT,
                    "init_scale": POS_NUM,
                },
                ("lam", "T"),
            ),
        },
        ("arch", "data", "gf"),
    ),
    "merge": _obj(
        {
            **COMMON,
            "d": {"type": "integer", "minimum": 2},
            "n": POS_INT,
            "m": POS_INT,
            "widths": {"type": "array", "items": POS_INT, "minItems": 1},
            "eta": POS_NUM,
            "lam": NONNEG_NUM,
            "steps": NONNEG_INT,
            "label_freq": POS_NUM,
            "control": {"enum": ["orthogonal", "same_task"]},
            "w0_b": {"enum": ["xavier", "task_support", "zero"]},
            "n_heldout": NONNEG_INT,
            "checkpoint_every": POS_INT,
        }
    ),
    "rank-sweep": _obj(
        {
            **COMMON,
            "d": POS_INT,
            "n": POS_INT,
            "widths": {"type": "array", "items": POS_INT, "minItems": 1},
            "label_freq": POS_NUM,
            "lambdas": {"type": "array", "items": NONNEG_NUM, "minItems": 1},
            "eta": POS_NUM,
            "epochs": NONNEG_INT,
            "batch_size": POS_INT,
            "activation": {"enum": ["identity", "relu"]},
        }
    ),
    "inspect": _obj(
        {
            **COMMON,
            "checkpoint": {"type": "string"},
            "groups": {
                "type": "object",
                "additionalProperties": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            },
        },
        ("checkpoint",),
    ),
    "gen-data": _obj(
        {
            **COMMON,
            "d": POS_INT,
            "tasks": {
                "type": "object",
                "minProperties": 1,
                "additionalProperties": _obj(
                    {
                        "n": POS_INT,
                        "subspace": {"type": "array", "items": NONNEG_INT, "minItems": 1},
                        "label_freq": POS_NUM,
                        "heldout": NONNEG_INT,
                    },
                    ("n",),
                ),
            },
        },
        ("d", "tasks"),
    ),
}


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = err.schema.get("properties", {})
        extra = sorted(k for k in err.instance if k not in allowed)
        if extra:
            parts.append(extra[0])
    if err.validator == "required":
        missing = [r for r in err.validator_value if r not in err.instance]
        if missing:
            parts.append(missing[0])
    return ".".join(parts) or "<root>"


def _deepest(err):
    # oneOf failures: report the branch whose source matches, if any
    if err.validator == "oneOf" and isinstance(err.instance, dict) and err.context:
        src = err.instance.get("source")
        branch = [e for e in err.context if e.schema_path and e.relative_schema_path[0] == _branch_index(src)]
        if branch:
            return sorted(branch, key=lambda e: len(list(e.absolute_path)), reverse=True)[0]
    return err


def _branch_index(source):
    return {"synthetic": 0, "clusters": 1, "csv": 2, "idx": 3}.get(source, -1)


def validate(command: str, doc) -> dict:
    """Raise ConfigError naming the offending field path, else return ``doc``."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    errors = sorted(Draft202012Validator(SCHEMAS[command]).iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = _deepest(errors[0])
        raise ConfigError(err.message, _path(err))
    _semantic_checks(command, doc)
    return doc


def _semantic_checks(command: str, doc: dict) -> None:
    arch = doc.get("arch")
    if arch:
        act, H = arch.get("activation", "relu"), arch.get("H", 1)
        if act != "relu_power" and H != 1:
            raise ConfigError(f"{act} requires H = 1", "arch.H")
        sub = doc.get("data", {}).get("subspace")
        if sub and max(sub) >= arch["d"]:
            raise ConfigError("subspace index out of range", "data.subspace")
    if command in ("train", "polish"):
        tr = doc["train"]
        if tr.get("init") == "balanced_rank1" and doc["arch"].get("activation", "relu") != "identity":
            raise ConfigError("balanced_rank1 needs identity activation", "train.init")
    if command == "polish" and not doc["train"]["lam"] > 0:
        raise ConfigError("polishing needs lam > 0", "train.lam")
    if command == "gf" and doc["arch"].get("activation", "relu") != "identity":
        raise ConfigError("gradient flow runs on deep linear nets", "arch.activation")
    if command == "merge":
        if doc.get("lam", 1e-3) * doc.get("eta", 0.5) >= 1:
            raise ConfigError("eta*lam must be below 1", "lam")
        if "m" in doc and "widths" in doc:
            raise ConfigError("give either m (shallow) or widths (deep), not both", "widths")
    if command == "gen-data":
        for name, t in doc["tasks"].items():
            if t.get("subspace") and max(t["subspace"]) >= doc["d"]:
                raise ConfigError("subspace index out of range", f"tasks.{name}.subspace")


def load(command: str, path) -> tuple[dict, str]:
    """Parse and validate a config file; return ``(doc, sha256 of the bytes)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", "<file>") from None
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"invalid JSON: {e}", "<file>") from None
    return validate(command, doc), hashlib.sha256(raw).hexdigest()
