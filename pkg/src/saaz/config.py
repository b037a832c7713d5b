"""Configuration loading.  Config files are JSON; scenarios may carry partial
overrides that are merged key by key into the base config."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .policy import canonical_json

ENV_VAR = "SAAZ_CONFIG"
REQUIRED = ("tick", "knowledge", "trust", "monitor", "detectors", "risk", "normality", "plan")


def data_path(*parts: str) -> Path:
    return Path(str(resources.files("saaz").joinpath("data", *parts)))


def merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict:
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Load ``path``; ``None`` or ``"default"`` mean $SAAZ_CONFIG or the shipped default."""
    if path is None:
        path = os.environ.get(ENV_VAR) or "default"
    if str(path) == "default":
        path = data_path("default_config.json")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    if not isinstance(cfg, Mapping):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in REQUIRED if k not in cfg]
    if missing:
        raise ConfigError(f"config lacks {', '.join(missing)}")
    x, y = cfg["risk"].get("x"), cfg["risk"].get("y")
    if x is None or y is None or not 0 <= x < y <= 1:
        raise ConfigError("risk thresholds must satisfy 0 <= x < y <= 1")
    if cfg["tick"] <= 0:
        raise ConfigError("tick must be positive")
    ids = [d.get("id") for d in cfg["detectors"]]
    if len(ids) != len(set(ids)):
        raise ConfigError("detector ids must be unique")


def config_digest(cfg: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
