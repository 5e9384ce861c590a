"""Whitelist-driven DOM pruning."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Set, Tuple

from .dom import (
    BACKEND_ATTR,
    NODE_ATTR,
    CommentNode,
    DomNode,
    DomTree,
    Node,
    TextNode,
    collapse_whitespace,
)

LOGGER = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent / "data"
DEFAULT_WHITELIST_FILE = DATA_DIR / "whitelist.txt"
GLOBAL_KEY = "*"


class WhitelistError(ValueError):
    """Raised when a whitelist file contains an unreadable entry."""


@dataclass(frozen=True, slots=True)
class PruneConfig:
    """What survives pruning.

    ``attr_whitelist`` maps a tag name (or ``"*"`` for every tag) to the
    attribute names kept on it. An empty ``tag_whitelist`` keeps every tag.
    ``attribute_order`` is the whitelist file order and fixes the serialized
    attribute order.
    """

    tag_whitelist: FrozenSet[str] = frozenset()
    attr_whitelist: Mapping[str, FrozenSet[str]] = field(default_factory=dict)
    drop_tags: FrozenSet[str] = frozenset(
        {"script", "style", "meta", "link", "noscript", "template", "head"}
    )
    ratio_threshold: float = 2.0
    ratio_min_len: int = 32
    attribute_order: Optional[Tuple[str, ...]] = None
    backend_attr: str = BACKEND_ATTR

    def __post_init__(self) -> None:
        if self.ratio_threshold < 1.0:
            raise ValueError(
                f"ratio_threshold must be >= 1.0, got {self.ratio_threshold!r}"
            )
        if self.ratio_min_len < 0:
            raise ValueError(f"ratio_min_len must be >= 0, got {self.ratio_min_len!r}")

    def keeps_tag(self, tag: str) -> bool:
        return not self.tag_whitelist or tag in self.tag_whitelist

    def keeps_attribute(self, tag: str, name: str) -> bool:
        if name in (NODE_ATTR, self.backend_attr):
            return True
        if name in self.attr_whitelist.get(GLOBAL_KEY, ()):
            return True
        return name in self.attr_whitelist.get(tag, ())

    def with_ratio(
        self, threshold: Optional[float] = None, min_len: Optional[int] = None
    ) -> "PruneConfig":
        return replace(
            self,
            ratio_threshold=self.ratio_threshold if threshold is None else threshold,
            ratio_min_len=self.ratio_min_len if min_len is None else min_len,
        )


def parse_whitelist(text: str, source: str = "<whitelist>") -> PruneConfig:
    """Parse the line-oriented whitelist format.

    ``tag`` keeps an element, ``tag.attr`` keeps an attribute on that tag,
    ``*.attr`` keeps an attribute everywhere, ``!tag`` drops the element with
    its subtree. ``#`` starts a comment.
    """

    tags: Set[str] = set()
    drop: Set[str] = set()
    attrs: Dict[str, Set[str]] = {}
    order: List[str] = []
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip().lower()
        if not line:
            continue
        if any(ch.isspace() for ch in line):
            raise WhitelistError(f"{source}:{number}: unexpected whitespace in {raw_line!r}")
        if line.startswith("!"):
            name = line[1:]
            if not name or "." in name:
                raise WhitelistError(f"{source}:{number}: invalid drop entry {raw_line!r}")
            drop.add(name)
            continue
        if "." in line:
            tag, _, attr = line.partition(".")
            if not tag or not attr or "." in attr:
                raise WhitelistError(f"{source}:{number}: invalid attribute entry {raw_line!r}")
            attrs.setdefault(tag, set()).add(attr)
            if attr not in order:
                order.append(attr)
            continue
        tags.add(line)
    return PruneConfig(
        tag_whitelist=frozenset(tags),
        attr_whitelist={tag: frozenset(names) for tag, names in attrs.items()},
        drop_tags=frozenset(drop) if drop else PruneConfig().drop_tags,
        attribute_order=tuple(order),
    )


def load_whitelist(path: str | os.PathLike[str]) -> PruneConfig:
    file_path = Path(path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise WhitelistError(f"Could not read whitelist file: {file_path}") from exc
    config = parse_whitelist(text, source=str(file_path))
    LOGGER.debug(
        "Loaded whitelist %s: %d tags, %d drop tags",
        file_path,
        len(config.tag_whitelist),
        len(config.drop_tags),
    )
    return config


@lru_cache(maxsize=1)
def default_config() -> PruneConfig:
    """The shipped whitelist with the standard ratio settings."""

    return load_whitelist(DEFAULT_WHITELIST_FILE)


def prune(tree: DomTree, config: PruneConfig) -> DomTree:
    """Remove dropped subtrees, comments, extra whitespace and unlisted attributes.

    Elements whose tag is not whitelisted are unwrapped: their children take
    their place. The result is a fixpoint, so pruning twice changes nothing.
    """

    return DomTree(children=_prune_children(tree.children, config))


def _prune_children(children: Tuple[Node, ...], config: PruneConfig) -> Tuple[Node, ...]:
    flat: List[Node] = []
    for child in children:
        flat.extend(_prune_node(child, config))
    return _normalize_text(flat)


def _prune_node(node: Node, config: PruneConfig) -> List[Node]:
    if isinstance(node, CommentNode):
        return []
    if isinstance(node, TextNode):
        return [node]
    if node.tag in config.drop_tags:
        return []
    children = _prune_children(node.children, config)
    if not config.keeps_tag(node.tag):
        return list(children)
    return [replace(node, attributes=_prune_attributes(node, config), children=children)]


def _prune_attributes(node: DomNode, config: PruneConfig) -> Dict[str, str]:
    kept: List[Tuple[str, str]] = []
    for name, value in node.attributes.items():
        if not config.keeps_attribute(node.tag, name):
            continue
        clean = collapse_whitespace(value).strip()
        if not clean:
            continue
        kept.append((name, clean))
    if config.attribute_order is not None:
        ranks = {name: rank for rank, name in enumerate(config.attribute_order)}
        fallback = len(ranks)
        kept.sort(key=lambda item: ranks.get(item[0], fallback))
    return dict(kept)


def _normalize_text(nodes: List[Node]) -> Tuple[Node, ...]:
    merged: List[Node] = []
    for node in nodes:
        if isinstance(node, TextNode) and merged and isinstance(merged[-1], TextNode):
            merged[-1] = TextNode(merged[-1].text + node.text)
        else:
            merged.append(node)
    result: List[Node] = []
    for node in merged:
        if isinstance(node, TextNode):
            text = collapse_whitespace(node.text)
            if not text.strip():
                continue
            result.append(TextNode(text))
        else:
            result.append(node)
    return tuple(result)
