"""Run configuration: one YAML (or JSON) document plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .types import AttackConfig

DEFAULTS: dict[str, dict[str, Any]] = {
    "attack": AttackConfig().to_dict(),
    "sweep": {"grid": [0.05, 0.1, 0.2, 0.3], "modes": ["untargeted", "targeted"]},
    "data": {
        "root": None,
        "index": None,
        "limit": None,
        "seed": 0,
        "tau": 0.7,
        "manifest": None,
        "pair_seed": None,
        "pairs": None,
    },
    "models": {"encoder_id": "toy", "captioner_id": "toy", "clip_id": "toy", "cache_dir": None},
    "eval": {"generated_caption_column": False},
    "run": {"output_dir": "runs", "workers": 1},
}


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be a mapping")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value


def load_config(path: str | Path | None = None) -> dict[str, dict[str, Any]]:
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    _merge(cfg, raw)
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in cfg or parts[1] not in cfg[parts[0]]:
            raise ConfigError(f"unknown override key {key!r}")
        try:
            value = yaml.safe_load(text) if text.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value in {item!r}") from exc
        cfg[parts[0]][parts[1]] = value
    return cfg


def attack_config(cfg: dict, **changes: Any) -> AttackConfig:
    section = dict(cfg["attack"])
    section.update(changes)
    for name in ("epsilon", "lam", "learning_rate", "beta1", "beta2", "scheduler_factor", "min_learning_rate"):
        if isinstance(section[name], int) and not isinstance(section[name], bool):
            section[name] = float(section[name])
    return AttackConfig.from_dict(section)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
