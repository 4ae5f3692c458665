"""JSON training configuration with dotted ``key=value`` overrides.

The schema is exactly the nested shape of :meth:`TrainConfig.to_dict`;
unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path
from typing import Iterable

from .augmentation import AugmentConfig
from .exceptions import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

_NESTED = {"weights": LossWeights, "augment": AugmentConfig, "model": ModelConfig}


def default_dict() -> dict:
    return TrainConfig().to_dict()


def _check_keys(d, cls, prefix=""):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def from_dict(d: dict) -> TrainConfig:
    """Build a TrainConfig from a (possibly partial) nested dict."""
    _check_keys(d, TrainConfig)
    defaults = default_dict()
    kw = {}
    for k, v in d.items():
        if k in _NESTED:
            _check_keys(v, _NESTED[k], k + ".")
            try:
                # missing nested keys fall back to the training defaults
                kw[k] = _NESTED[k](**{**defaults[k], **v})
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{k}: {e}") from e
        else:
            kw[k] = v
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: Iterable[str]) -> dict:
    """Return a copy of ``d`` with each ``a.b=value`` applied.

    Values are parsed as JSON when possible (``1e-3``, ``true``,
    ``[0.9, 1.1]``) and kept as strings otherwise.  The key must already
    exist in ``d``.
    """
    out = copy.deepcopy(d)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Defaults, then the JSON file at ``path`` (if any), then overrides."""
    d = default_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        _check_keys(user, TrainConfig)
        for k, v in user.items():
            if k in _NESTED:
                _check_keys(v, _NESTED[k], k + ".")
                d[k].update(v)
            else:
                d[k] = v
    return from_dict(apply_overrides(d, overrides))


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
