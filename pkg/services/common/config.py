"""
Configuration management

Two layers:
- Settings: process-level knobs from the environment (XVIEW_*) or .env
- flat run-config files: `key=value` lines or a flat YAML mapping, parsed
  here and validated by the cli's RunConfig model
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from services.common.exceptions import ConfigError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


class Settings(BaseSettings):
    """Process-level settings with validation"""

    environment: str = Field("development", pattern="^(development|ci|production)$")
    log_level: str = Field("INFO", pattern="^(DEBUG|INFO|WARNING|ERROR|CRITICAL)$")
    log_format: str = Field("text", pattern="^(text|json)$")
    log_dir: Optional[str] = None

    # NaN/Inf check after every primitive (debug mode)
    check_finite: bool = Field(False)

    metrics_namespace: str = Field("xview", pattern="^[a-zA-Z_][a-zA-Z0-9_]*$")

    @field_validator("log_level", mode="before")
    @classmethod
    def upper_log_level(cls, v):
        return v.upper() if isinstance(v, str) else v

    model_config = SettingsConfigDict(
        env_prefix="XVIEW_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


# ============ Flat run-config files ============

ConfigValue = Union[str, int, float, bool]


def parse_key_values(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    """
    Parse `key=value` lines

    Blank lines and `#` comments (whole-line or trailing) are ignored.

    Raises:
        ConfigError: On malformed lines or duplicate keys
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", field=key)
        values[key] = value
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, ConfigValue]:
    """
    Read a flat run-config file

    `.yaml`/`.yml` files must hold a flat mapping; anything else is parsed as
    `key=value` lines.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: YAML config must be a mapping")
        for key, value in data.items():
            if isinstance(value, (dict, list)):
                raise ConfigError(f"{path}: nested value for {key!r}; configs are flat", field=str(key))
        return {str(k): v for k, v in data.items()}

    values = parse_key_values(text.splitlines(), source=str(path))
    logger.debug(f"Read {len(values)} keys from {path}")
    return dict(values)


def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    """Parse repeated `--set key=value` command-line overrides"""
    result: Dict[str, str] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must be key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        result[key] = value
    return result


def build_model(model_cls: Type[ModelT], values: Mapping[str, Any], source: str = "config") -> ModelT:
    """
    Validate `values` into a pydantic model, reporting failures as ConfigError

    The first failing field is named in the error.
    """
    try:
        return model_cls(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first.get("loc", ())) or None
        raise ConfigError(f"{source}: {field or 'value'}: {first.get('msg')}", field=field) from exc
