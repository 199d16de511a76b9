"""
Configuration Helpers for the JointSR Project
YAML loading (nested or flat dotted keys), .env / environment overrides,
``--set key=value`` parsing, type coercion of raw values and the flat-config echo.

Precedence, lowest to highest: dataclass defaults, config file, environment, overrides.
The typed run schema built from these pieces lives in ``run_config``.
"""

import logging
import os
import typing
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml
from dotenv import find_dotenv, load_dotenv

from utils.exceptions import ConfigError

OUTPUT_ROOT_ENV = "JOINTSR_OUTPUT_ROOT"
RESOLVED_CONFIG_FILE = "resolved_config.yaml"

logger = logging.getLogger(__name__)


def flatten(mapping: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Flatten nested mappings into dotted keys; already-dotted keys pass through."""
    flat = {}
    for key, value in mapping.items():
        full_key = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, Mapping):
            flat.update(flatten(value, full_key))
        else:
            flat[full_key] = value
    return flat


def coerce_value(value: Any, annotation: Any, key: str) -> Any:
    """
    Convert a YAML/CLI value to a field's declared type.

    Handles Optional, homogeneous tuples, bool (yes/no/on/off strings), int, float and str;
    anything else passes through.

    Raises:
        ConfigError: If the value cannot be converted
    """
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if origin is typing.Union and type(None) in args:
            if value is None or (isinstance(value, str) and value.lower() in ("null", "none", "")):
                return None
            inner = next(a for a in args if a is not type(None))
            return coerce_value(value, inner, key)
        if origin in (tuple, Tuple):
            if isinstance(value, str):
                value = yaml.safe_load(value)
            if not isinstance(value, (list, tuple)):
                raise ValueError("expected a list")
            element = args[0] if args else Any
            return tuple(coerce_value(v, element, key) for v in value)
        if annotation is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("true", "yes", "1", "on"):
                    return True
                if lowered in ("false", "no", "0", "off"):
                    return False
                raise ValueError("expected a boolean")
            return bool(value)
        if annotation is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if annotation is float:
            return float(value)
        if annotation is str:
            return str(value)
    except (TypeError, ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"Invalid value for {key}: {value!r} ({e})") from e
    return value


def _parse_scalar(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, Any]:
    """Parse ``key=value`` strings; values are read as YAML scalars."""
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"Override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = _parse_scalar(value.strip())
    return overrides


def load_config_file(path: str) -> Dict[str, Any]:
    """
    Read a YAML config file into the flat dotted-key form.

    Raises:
        ConfigError: If the file is missing, not YAML, or not a mapping
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"Config file {path} must contain a mapping")
    return flatten(data)


def environment_overrides(dotenv_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Values taken from the environment, after loading the nearest .env (searched upward
    from the working directory) without overriding real variables.
    """
    dotenv_path = dotenv_path or find_dotenv(usecwd=True)
    if dotenv_path:
        load_dotenv(dotenv_path, override=False)
    overrides = {}
    output_root = os.getenv(OUTPUT_ROOT_ENV)
    if output_root:
        overrides["run.output_dir"] = output_root
    return overrides


def merge_sources(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                  use_env: bool = True) -> Dict[str, Any]:
    """Flat keys from file < environment < overrides."""
    flat: Dict[str, Any] = {}
    if path:
        flat.update(load_config_file(path))
    if use_env:
        flat.update(environment_overrides())
    flat.update(overrides or {})
    return flat


def to_plain(value: Any) -> Any:
    """Tuples become lists so the YAML echo stays readable by safe_load."""
    if isinstance(value, tuple):
        return [to_plain(v) for v in value]
    return value


def dump_flat(flat: Mapping[str, Any], output_dir: str, filename: str = RESOLVED_CONFIG_FILE) -> str:
    """Write flat keys (sorted) as YAML under ``output_dir``."""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, filename)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        yaml.safe_dump({key: to_plain(value) for key, value in flat.items()}, f, sort_keys=True,
                       default_flow_style=None, allow_unicode=True)
    logger.debug(f"Resolved config written to {path}")
    return path
