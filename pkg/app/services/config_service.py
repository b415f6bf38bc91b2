"""
Run configuration loading: JSON file, dotted overrides, validation.
"""
import json
import logging
import os
from typing import Any, Dict, Iterable, Optional

from pydantic import ValidationError

from app.errors import ConfigError, VariantError
from app.models.config import RunConfig
from app.storage import runs_root

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))), "configs", "default.json")


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: Dict[str, Any], override: str) -> None:
    """Set ``a.b.c=value`` inside the nested dict ``data``."""
    if "=" not in override:
        raise ConfigError(f"override '{override}' is not of the form key=value", field_path=override)
    key, raw = override.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override '{override}' has an empty key")
    node = data
    for i, part in enumerate(parts[:-1]):
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError("is not a section", field_path=".".join(parts[: i + 1]))
        node = child
    node[parts[-1]] = _parse_value(raw.strip())


def config_error_from(exc: ValidationError) -> ConfigError:
    """First failing location joined by dots, e.g. ``train.max_iter``."""
    first = exc.errors()[0]
    path = ".".join(str(p) for p in first.get("loc", ()))
    message = first.get("msg", str(exc))
    if path.split(".")[0] == "variant":
        return VariantError(message, field_path=path)
    return ConfigError(message, field_path=path or None)


def load_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def parse_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Load ``path`` (or the built-in defaults), apply overrides, validate."""
    overrides = list(overrides)
    data = load_config_file(path) if path else {}
    for override in overrides:
        apply_override(data, override)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise config_error_from(e) from e
    logger.debug(f"Config resolved from {path or 'defaults'} with {len(overrides)} override(s)")
    return config


def resolve_output_dir(config: RunConfig, explicit: Optional[str] = None) -> str:
    """An explicit directory is used as given; config paths are relative to the runs root."""
    if explicit:
        return explicit
    if os.path.isabs(config.output_dir):
        return config.output_dir
    return os.path.join(runs_root(), config.output_dir)


def config_from_args(args) -> RunConfig:
    return parse_config(getattr(args, "config", None), getattr(args, "overrides", None) or [])
