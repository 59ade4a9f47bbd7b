"""Environment and config-file settings for WarpCond commands."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Final, Mapping, Optional

from dotenv import dotenv_values

ENV_PREFIX: Final = "WARPCOND_"

DEFAULT_SEED: Final = 0
DEFAULT_THREADS: Final = 1
DEFAULT_DEVICE: Final = "cpu"
DEFAULT_LOG_LEVEL: Final = "INFO"
DEFAULT_MODEL_RES: Final = 64

SUPPORTED_DEVICES: Final = frozenset({"cpu", "cuda", "mps"})
SUPPORTED_LOG_LEVELS: Final = frozenset({"DEBUG", "INFO", "WARNING", "ERROR"})

LOG_FORMAT: Final = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _normalize_key(key: str) -> str:
    key = (key or "").strip()
    if key.upper().startswith(ENV_PREFIX):
        key = key[len(ENV_PREFIX):]
    return key.lower().replace("-", "_")


def _env(name: str) -> Optional[str]:
    value = os.getenv(f"{ENV_PREFIX}{name.upper()}")
    if value is None or not value.strip():
        return None
    return value.strip()


def _resolve_int(explicit: Optional[Any], name: str, default: int, *, minimum: int) -> int:
    raw = explicit if explicit is not None else _env(name)
    if raw is None:
        return default
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise ValueError(
            f"Invalid {name} '{raw}'. Set {ENV_PREFIX}{name.upper()} or --{name.replace('_', '-')} to an integer."
        ) from None
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def _resolve_choice(explicit: Optional[str], name: str, default: str, supported: frozenset[str]) -> str:
    value = (explicit or _env(name) or default).strip()
    normalized = value.upper() if name == "log_level" else value.lower()
    if normalized not in supported:
        supported_list = ", ".join(sorted(supported))
        raise ValueError(f"Unsupported {name} '{value}'. Supported: {supported_list}")
    return normalized


def resolve_seed(explicit: Optional[Any] = None) -> int:
    return _resolve_int(explicit, "seed", DEFAULT_SEED, minimum=0)


def resolve_threads(explicit: Optional[Any] = None) -> int:
    return _resolve_int(explicit, "threads", DEFAULT_THREADS, minimum=1)


def resolve_model_res(explicit: Optional[Any] = None) -> int:
    return _resolve_int(explicit, "model_res", DEFAULT_MODEL_RES, minimum=8)


def resolve_device(explicit: Optional[str] = None) -> str:
    return _resolve_choice(explicit, "device", DEFAULT_DEVICE, SUPPORTED_DEVICES)


def resolve_log_level(explicit: Optional[str] = None) -> str:
    return _resolve_choice(explicit, "log_level", DEFAULT_LOG_LEVEL, SUPPORTED_LOG_LEVELS)


def load_config_file(path: Optional[str | Path]) -> dict[str, str]:
    """Read a KEY=VALUE config file; keys are normalized to flag names."""
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.is_file():
        raise FileNotFoundError(f"Config file not found: {config_path}")
    values = dotenv_values(config_path)
    return {_normalize_key(key): value for key, value in values.items() if value is not None}


def merge_config(
    flags: Mapping[str, Any],
    file_values: Mapping[str, Any],
    defaults: Mapping[str, Any],
) -> dict[str, Any]:
    """Combine flag, config-file, environment and default values.

    Flags win over the config file, the config file over ``WARPCOND_*``
    variables, and those over built-in defaults. A flag left at ``None`` counts
    as not given.
    """
    resolved: dict[str, Any] = {}
    keys = set(defaults) | set(flags) | set(file_values)
    for key in sorted(keys):
        flag_value = flags.get(key)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_values:
            resolved[key] = _coerce_like(file_values[key], defaults.get(key), key)
        elif _env(key) is not None:
            resolved[key] = _coerce_like(_env(key), defaults.get(key), key)
        else:
            resolved[key] = defaults.get(key)
    return resolved


def _coerce_like(raw: Any, template: Any, key: str) -> Any:
    if template is None or not isinstance(raw, str):
        return raw
    try:
        if isinstance(template, bool):
            return raw.strip().lower() in {"1", "true", "yes", "on"}
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"Invalid value '{raw}' for '{key}'") from None
    return raw


def format_resolved_config(config: Mapping[str, Any]) -> str:
    """Render a resolved configuration as one JSON line."""
    return json.dumps({key: _jsonable(value) for key, value in config.items()}, sort_keys=True)


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value


def configure_logging(level: Optional[str] = None) -> str:
    """Install a single stream handler at the resolved level."""
    resolved = resolve_log_level(level)
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=resolved, format=LOG_FORMAT)
    root.setLevel(resolved)
    return resolved
