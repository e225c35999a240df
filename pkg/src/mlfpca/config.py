"""Flat ``key = value`` configuration files and environment overrides.

Effective settings are resolved as defaults < config file < environment
(``MLFPCA_<KEY>``) < command-line flags. Keys use underscores; dashes in a
config file are accepted and normalised.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Callable, Mapping

ENV_PREFIX = "MLFPCA_"


class ConfigError(ValueError):
    pass


def normalise_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = normalise_key(key)
        if not key:
            raise ConfigError(f"{path}: line {lineno}: empty key")
        out[key] = value.strip()
    return out


def env_overrides(keys, environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for key in keys:
        name = ENV_PREFIX + key.upper()
        if name in environ:
            out[key] = environ[name]
    return out


def parse_bool(value: str | bool) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot interpret {value!r} as a boolean")


def resolve(
    defaults: Mapping[str, Any],
    converters: Mapping[str, Callable[[str], Any]],
    file_values: Mapping[str, str],
    env_values: Mapping[str, str],
    flag_values: Mapping[str, Any],
) -> dict[str, Any]:
    """Merge the four layers; string values from files and the environment
    are converted with ``converters``. Unknown file keys are rejected."""
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    out = dict(defaults)
    for layer in (file_values, env_values):
        for key, raw in layer.items():
            conv = converters.get(key, str)
            try:
                out[key] = conv(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid value {raw!r} for {key}: {exc}") from None
    for key, value in flag_values.items():
        if value is not None and key in out:
            out[key] = value
    return out
