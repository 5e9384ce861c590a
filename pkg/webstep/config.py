"""Endpoint settings and the optional TOML defaults file."""
from __future__ import annotations

import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .secrets import load_secrets, resolve_secret

LOGGER = logging.getLogger(__name__)

load_secrets()

DEFAULT_ENV_PREFIX = "WEBSTEP"


class ConfigError(ValueError):
    """Raised for an unreadable or malformed configuration file."""


@dataclass(slots=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "WEBSTEP_API_KEY"
    timeout: float = 60.0
    max_attempts: int = 3
    backoff_seconds: float = 1.0
    max_parallel: int = 4
    verify_ssl: bool = True

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be at least 1, got {self.max_attempts!r}")
        if self.max_parallel < 1:
            raise ValueError(f"max_parallel must be at least 1, got {self.max_parallel!r}")

    @classmethod
    def from_env(cls, prefix: str = DEFAULT_ENV_PREFIX) -> "EndpointConfig":
        base_url = os.getenv(f"{prefix}_BASE_URL")
        if not base_url:
            raise RuntimeError(f"{prefix}_BASE_URL environment variable is required")
        return cls(
            base_url=base_url.rstrip("/"),
            model=os.getenv(f"{prefix}_MODEL", "default"),
            api_key_env=os.getenv(f"{prefix}_API_KEY_ENV", f"{prefix}_API_KEY"),
            timeout=_parse_float(os.getenv(f"{prefix}_TIMEOUT"), default=60.0),
            max_attempts=_parse_optional_positive_int(
                os.getenv(f"{prefix}_MAX_ATTEMPTS"), default=3
            )
            or 1,
            backoff_seconds=_parse_float(os.getenv(f"{prefix}_BACKOFF_SECONDS"), default=1.0),
            max_parallel=_parse_optional_positive_int(
                os.getenv(f"{prefix}_MAX_PARALLEL"), default=4
            )
            or 1,
            verify_ssl=_parse_bool(os.getenv(f"{prefix}_VERIFY_SSL"), True),
        )

    def api_key(self) -> str:
        return resolve_secret(self.api_key_env)


def load_config_file(
    path: str | os.PathLike[str], section: Optional[str] = None
) -> Dict[str, Any]:
    """Read defaults from a TOML file.

    Top-level keys apply everywhere; keys inside the table named ``section``
    (a subcommand name) override them. Dashes in keys become underscores so
    they line up with argparse destinations.
    """

    file_path = Path(path)
    try:
        with file_path.open("rb") as handle:
            data = tomllib.load(handle)
    except OSError as exc:
        raise ConfigError(f"Could not read config file: {file_path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Could not parse config file {file_path}: {exc}") from exc

    values = {
        key.replace("-", "_"): value
        for key, value in data.items()
        if not isinstance(value, dict)
    }
    if section is not None:
        table = data.get(section, {})
        if not isinstance(table, dict):
            raise ConfigError(f"{file_path}: [{section}] must be a table")
        values.update({key.replace("-", "_"): value for key, value in table.items()})
    return values


def _parse_bool(value: Optional[str], default: bool) -> bool:
    if value is None:
        return default
    normalized = value.strip().lower()
    if normalized in {"1", "true", "yes", "on"}:
        return True
    if normalized in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"Invalid boolean value: {value!r}")


def _parse_float(value: Optional[str], *, default: float) -> float:
    if value is None or value.strip() == "":
        return default
    try:
        return float(value)
    except ValueError as exc:
        raise ValueError(f"Invalid number value: {value!r}") from exc


def _parse_optional_positive_int(value: Optional[str], *, default: Optional[int]) -> Optional[int]:
    if value is None or value.strip() == "":
        return default
    try:
        parsed = int(value)
    except ValueError as exc:
        raise ValueError(f"Invalid integer value: {value!r}") from exc
    if parsed <= 0:
        return None
    return parsed
