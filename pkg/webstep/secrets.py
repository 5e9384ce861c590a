"""Loading credentials from ``secrets.json`` into the environment."""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any

LOGGER = logging.getLogger(__name__)

DEFAULT_SECRETS_FILE = Path(__file__).resolve().parent.parent / "secrets.json"


def load_secrets(file_path: str | os.PathLike[str] | None = None) -> int:
    """Copy the JSON object in ``file_path`` into ``os.environ``.

    Variables already set in the environment win over the file, so a
    deployment can override anything stored on disk. A missing file is not an
    error. Returns the number of variables that were set.
    """

    path = Path(file_path) if file_path is not None else DEFAULT_SECRETS_FILE
    if not path.exists():
        return 0

    try:
        data: Any = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RuntimeError(f"Could not parse secrets file: {path}") from exc

    if not isinstance(data, dict):
        raise RuntimeError("Secrets file must contain a JSON object at the top level")

    loaded = 0
    for key, value in data.items():
        if value is None or str(key) in os.environ:
            continue
        os.environ[str(key)] = str(value)
        loaded += 1
    LOGGER.debug("Loaded %d variables from %s", loaded, path)
    return loaded


def resolve_secret(env_name: str) -> str:
    value = os.getenv(env_name, "").strip()
    if not value:
        raise RuntimeError(f"{env_name} environment variable is required")
    return value


def redact(value: str, keep: int = 4) -> str:
    """Mask all but the last ``keep`` characters of a credential for logging."""

    if len(value) <= keep:
        return "*" * len(value)
    return "*" * (len(value) - keep) + value[-keep:]
