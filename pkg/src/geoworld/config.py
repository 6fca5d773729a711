"""Experiment configuration: TOML or JSON files checked against a fixed schema.

Validation is strict: any key the schema does not know is an error that names
its dotted path, so typos like ``learning_rte`` never silently fall back to a
default.
"""

from __future__ import annotations

import copy
import json
import math
import sys
from pathlib import Path
from typing import Any, Dict, List

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

TAU = 2.0 * math.pi

_num = (int, float)

# key -> (accepted types, default).  Nested dicts are sub-schemas.
TOP = {
    "name": (str, None),
    "env": (str, None),
    "n": (int, None),
    "seed": (int, 0),
    "holdout_frac": (_num, 0.1),
    "eval_interval": (int, 1000),
    "output_dir": (str, "runs"),
    "latent": (list, None),
    "wall_mode": (str, "selfloop"),
}

SECTIONS = {
    "data": {
        "transitions": (int, 2000),
        "horizon": (int, 50),
    },
    "train": {
        "learning_rate": (_num, 1e-4),
        "batch_size": (int, 32),
        "steps": (int, 50_000),
        "clip_norm": (_num, 0.5),
    },
    "optimizer": {
        "rho": (_num, 0.99),
        "momentum": (_num, 0.9),
        "eps": (_num, 1e-8),
    },
    "losses": {
        "temperature": (_num, 1.0),
        "hinge": (_num, 0.5),
        "entropy_c": (_num, 1.0),
        "infonce": (_num, 1.0),
        "reward": (_num, 1.0),
        "volume": (_num, 1.0),
        "disentangle": (_num, 1.0),
        "entropy": (_num, 0.0),
        "symmetrized": (bool, False),
        "metric": (str, "L2"),
    },
    "model": {
        "encoder_hidden": (list, [32, 32]),
        "transition_hidden": (list, [32]),
        "reward_hidden": (list, [32]),
        "featurize": (str, "periodic"),
        "hard_mask": (bool, False),
        "per_action_nets": (bool, False),
    },
    "rl": {
        "gamma": (_num, 0.95),
        "batch_size": (int, 64),
        "learning_rate": (_num, 1e-4),
        "steps": (int, 20_000),
        "sync_interval": (int, 500),
        "hidden": (list, [64, 64]),
        "clip_norm": (_num, 0.5),
        "synthetic_weight": (_num, 1.0),
        "eval_interval": (int, 20),
        "max_steps": (int, 50),
        "window": (int, 100),
        "holdout_frac": (_num, 0.2),
        "transitions": (int, 2000),
        "horizon": (int, 50),
        "goal": (list, None),
    },
}

VARIANT = {
    "name": (str, None),
    "latent": (list, None),
    "masks": ((str, list), "default"),
    "losses": (dict, None),
    "model": (dict, None),
}

ENVS = ("passage", "torus", "grid_orient")


def _type_ok(value, types) -> bool:
    types = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def _check_table(table: dict, schema: dict, path: str) -> dict:
    out = {}
    for key, value in table.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(where, "unknown key")
        types, default = schema[key]
        # null is allowed wherever the default is "unset", so resolved configs reload
        if value is None and default is None:
            out[key] = None
            continue
        if not _type_ok(value, types):
            raise ConfigError(where, f"expected {_type_name(types)}, got {type(value).__name__}")
        out[key] = value
    for key, (_, default) in schema.items():
        out.setdefault(key, copy.deepcopy(default))
    return out


def _type_name(types) -> str:
    types = types if isinstance(types, tuple) else (types,)
    names = []
    for t in types:
        names.extend(x.__name__ for x in t) if isinstance(t, tuple) else names.append(t.__name__)
    return " or ".join(names)


def _check_latent(latent, path):
    if not latent:
        raise ConfigError(path, "latent must list at least one factor")
    for i, f in enumerate(latent):
        where = f"{path}[{i}]"
        if not isinstance(f, dict) or len(f) != 1:
            raise ConfigError(where, "each factor is a table with exactly one key: circle or euclid")
        (kind, val), = f.items()
        if kind == "circle":
            if not _type_ok(val, _num) or not (math.isfinite(val) and val > 0):
                raise ConfigError(f"{where}.circle", "modulus must be a positive finite number")
        elif kind == "euclid":
            if not _type_ok(val, int) or val < 1:
                raise ConfigError(f"{where}.euclid", "dimension must be a positive integer")
        else:
            raise ConfigError(f"{where}.{kind}", "unknown key")


def _check_masks(masks, path):
    if isinstance(masks, str):
        if masks not in ("default", "none"):
            raise ConfigError(path, "masks must be 'default', 'none' or a list of index lists")
        return
    for i, m in enumerate(masks):
        if not isinstance(m, list) or not all(_type_ok(j, int) and j >= 0 for j in m):
            raise ConfigError(f"{path}[{i}]", "mask must be a list of non-negative coordinate indices")


def validate(raw: Dict[str, Any]) -> Dict[str, Any]:
    """Return a fully defaulted copy of ``raw`` or raise :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a table")
    top_raw = {k: v for k, v in raw.items() if k not in SECTIONS and k != "variants"}
    cfg = _check_table(top_raw, TOP, "")
    for key in ("name", "env", "n"):
        if cfg[key] is None:
            raise ConfigError(key, "required key missing")
    if cfg["env"] not in ENVS:
        raise ConfigError("env", f"must be one of {', '.join(ENVS)}")
    if not 0.0 <= cfg["holdout_frac"] < 1.0:
        raise ConfigError("holdout_frac", "must lie in [0, 1)")
    if cfg["latent"] is None:
        cfg["latent"] = default_latent(cfg["env"])
    _check_latent(cfg["latent"], "latent")
    for name, schema in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(name, "expected a table")
        cfg[name] = _check_table(section, schema, name)
    if cfg["losses"]["metric"] not in ("L1", "L2"):
        raise ConfigError("losses.metric", "must be 'L1' or 'L2'")
    if cfg["model"]["featurize"] not in ("periodic", "raw"):
        raise ConfigError("model.featurize", "must be 'periodic' or 'raw'")
    if not 0.0 <= cfg["rl"]["holdout_frac"] < 1.0:
        raise ConfigError("rl.holdout_frac", "must lie in [0, 1)")
    variants = raw.get("variants", [{"name": "default"}])
    if not isinstance(variants, list) or not variants:
        raise ConfigError("variants", "expected a non-empty array of tables")
    seen = set()
    out_variants = []
    for i, v in enumerate(variants):
        where = f"variants[{i}]"
        if not isinstance(v, dict):
            raise ConfigError(where, "expected a table")
        v = _check_table(v, VARIANT, where)
        if not v["name"]:
            raise ConfigError(f"{where}.name", "required key missing")
        if v["name"] in seen:
            raise ConfigError(f"{where}.name", f"duplicate variant name {v['name']!r}")
        seen.add(v["name"])
        if v["latent"] is None:
            v["latent"] = copy.deepcopy(cfg["latent"])
        _check_latent(v["latent"], f"{where}.latent")
        _check_masks(v["masks"], f"{where}.masks")
        v["losses"] = _check_table(v["losses"] or {}, {k: (t, None) for k, (t, _) in SECTIONS["losses"].items()}, f"{where}.losses")
        v["model"] = _check_table(v["model"] or {}, {k: (t, None) for k, (t, _) in SECTIONS["model"].items()}, f"{where}.model")
        out_variants.append(v)
    cfg["variants"] = out_variants
    return cfg


def default_latent(env: str) -> List[dict]:
    if env == "passage":
        return [{"circle": TAU}]
    if env == "torus":
        return [{"circle": TAU}, {"circle": TAU}]
    return [{"circle": TAU}, {"euclid": 2}]


def load(path) -> Dict[str, Any]:
    """Read and validate a ``.toml`` or ``.json`` configuration file."""
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read file: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(str(path), f"parse error: {exc}") from None
    return validate(raw)


def merged_section(cfg: dict, variant: dict, section: str) -> dict:
    """Top-level ``section`` with the variant's non-null overrides applied."""
    out = dict(cfg[section])
    out.update({k: v for k, v in variant[section].items() if v is not None})
    return out
