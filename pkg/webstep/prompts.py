"""Prompt templates shipped as text files under ``webstep/data/prompts``."""
from __future__ import annotations

import logging
import os
import string
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Optional

from .pruning import DATA_DIR

LOGGER = logging.getLogger(__name__)

PROMPTS_DIR = DATA_DIR / "prompts"
STAGE_TEMPLATES = ("refine", "select", "translate", "check", "baseline")


class PromptTemplateError(ValueError):
    """Raised when a template is missing or cannot be filled."""


@dataclass(frozen=True)
class TemplatePack:
    directory: Path
    texts: Dict[str, str]

    def get(self, name: str) -> str:
        try:
            return self.texts[name]
        except KeyError as exc:
            raise PromptTemplateError(
                f"Unknown prompt template {name!r} in {self.directory}"
            ) from exc

    def placeholders(self, name: str) -> FrozenSet[str]:
        return frozenset(
            field_name
            for _, field_name, _, _ in string.Formatter().parse(self.get(name))
            if field_name
        )

    def render(self, name: str, **values: object) -> str:
        template = self.get(name)
        missing = self.placeholders(name) - values.keys()
        if missing:
            raise PromptTemplateError(
                f"Template {name!r} needs values for: {', '.join(sorted(missing))}"
            )
        return template.format(**values)


def load_templates(directory: str | os.PathLike[str] | None = None) -> TemplatePack:
    """Read every ``*.txt`` file in ``directory`` as a template named by its stem."""

    path = Path(directory) if directory is not None else PROMPTS_DIR
    if not path.is_dir():
        raise PromptTemplateError(f"Prompt directory not found: {path}")
    texts = {
        file.stem: file.read_text(encoding="utf-8").rstrip("\n")
        for file in sorted(path.glob("*.txt"))
    }
    missing = [name for name in STAGE_TEMPLATES if name not in texts]
    if missing:
        raise PromptTemplateError(f"{path} is missing templates: {', '.join(missing)}")
    LOGGER.debug("Loaded %d prompt templates from %s", len(texts), path)
    return TemplatePack(directory=path, texts=texts)


@lru_cache(maxsize=1)
def _default_pack() -> TemplatePack:
    return load_templates()


def get_template(name: str, pack: Optional[TemplatePack] = None) -> str:
    """Return the raw text of template ``name``."""

    return (pack or _default_pack()).get(name)


def render_template(name: str, pack: Optional[TemplatePack] = None, **values: object) -> str:
    return (pack or _default_pack()).render(name, **values)
