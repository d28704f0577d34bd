"""
Flat key=value configuration files

Config files use the same syntax as the service's .env file and are parsed
with python-dotenv, then validated by the pydantic models in app.models.
"""

import io
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Type, TypeVar, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError

from app.exceptions import ConfigError
from app.models import PRESET_RECIPES, PRESETS, ModelConfig, TrainRecipe, resolve_preset_name

logger = logging.getLogger(__name__)

PRESET_TABLES: Dict[type, Dict[str, Dict[str, Any]]] = {ModelConfig: PRESETS, TrainRecipe: PRESET_RECIPES}

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def _format_validation_error(exc: ValidationError) -> ConfigError:
    fields = []
    messages = []
    for err in exc.errors():
        field = ".".join(str(part) for part in err["loc"]) or "<config>"
        fields.append(field)
        messages.append(f"{field}: {err['msg']}")
    return ConfigError("; ".join(messages), fields=fields)


def parse_config(values: Dict[str, Any], model_cls: Type[ConfigT]) -> ConfigT:
    """
    Validate a raw key/value mapping against a config model

    A `preset` key seeds the values from a named preset: the architecture in
    model configs, the drop-path rate and CutMix alpha in training recipes.
    Explicit keys win over preset values.

    Raises:
        ConfigError: naming every failing field
    """
    values = {key.strip().lower(): value for key, value in values.items() if value not in (None, "")}
    preset = values.pop("preset", None)
    if preset is not None:
        table = PRESET_TABLES.get(model_cls)
        if table is None:
            raise ConfigError(f"'preset' is not valid in {model_cls.__name__}", ["preset"])
        try:
            values = {**table[resolve_preset_name(preset)], **values}
        except KeyError as e:
            raise ConfigError(str(e), ["preset"]) from e
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        raise _format_validation_error(e) from e


def load_config(path: Union[str, Path], model_cls: Type[ConfigT]) -> ConfigT:
    """
    Load and validate a key=value config file

    Args:
        path: File path
        model_cls: Pydantic model to validate against

    Returns:
        Validated config instance
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}", ["path"])
    logger.debug("📥 Loading %s from %s", model_cls.__name__, path)
    return parse_config(dict(dotenv_values(path)), model_cls)


def config_to_text(config: BaseModel) -> str:
    """Serialize a config as key=value lines, config_version first, None fields omitted"""
    data = config.model_dump()
    lines = []
    ordered = ["config_version"] + [key for key in data if key != "config_version"]
    for key in ordered:
        value = data.get(key)
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, Enum):
            value = value.value
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, model_cls: Type[ConfigT]) -> ConfigT:
    """Inverse of config_to_text"""
    return parse_config(dict(dotenv_values(stream=io.StringIO(text))), model_cls)


def save_config(config: BaseModel, path: Union[str, Path]) -> Path:
    """Write a resolved config snapshot"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_text(config), encoding="utf-8")
    return path
