"""The five-line action format and the next-step prompt layout."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

from .dom import NODE_ATTR
from .prompts import get_template

LOGGER = logging.getLogger(__name__)

CLICK = "mouse_click_action"
TYPE = "keyboard_sequence_action"
PRESS = "keyboard_combination_action"
ACTION_SPACE = (CLICK, TYPE, PRESS)

# Bump when the Description templates below change.
DESCRIPTION_TEMPLATE_VERSION = 2
_DESCRIPTION_TEMPLATES = {
    TYPE: ('{description}: type "{payload}"', 'Type "{payload}"'),
    PRESS: ('{description}: press "{payload}"', 'Press "{payload}"'),
}
_EMPTY_DESCRIPTIONS = {TYPE: "Enter text", PRESS: "Press keys"}
_TEMPLATE_VERBS = ("type", "press")

_INDEX_LINE = re.compile(r"^(\d+)\.$")
_VERB_PAYLOAD = re.compile(r'(?:type|press)\s+"(.*?)"', re.IGNORECASE)
_QUOTED = re.compile(r'"(.*?)"')
_FIELDS = ("Description", "Action", "Node", "Target")


class ActionParseError(ValueError):
    """Raised when text cannot be read as a five-line action."""

    def __init__(self, message: str, diagnostics: Sequence[str] = ()) -> None:
        detail = "; ".join(diagnostics)
        super().__init__(f"{message}: {detail}" if detail else message)
        self.diagnostics = list(diagnostics)


@dataclass(frozen=True, slots=True)
class Action:
    """One step of a workflow. ``payload`` holds typed text or a key combo."""

    index: int
    description: str
    op: str
    node: int
    target: str
    payload: Optional[str] = None

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"Action index must be positive, got {self.index!r}")
        if self.node < 0:
            raise ValueError(f"Invalid node id: {self.node!r}")
        if self.op not in ACTION_SPACE:
            raise ValueError(f"Unknown operation: {self.op!r}")

    @property
    def key(self) -> tuple:
        """What makes two predictions the same action."""

        return (self.op, self.node, self.payload or "")

    def target_matches_node(self) -> bool:
        return f'{NODE_ATTR}="{self.node}"' in self.target


def describe(description: str, op: str, payload: Optional[str]) -> str:
    """Make sure a keyboard action's Description carries its payload.

    A Description is kept as is when ``extract_payload`` already reads the
    payload back from it; otherwise the versioned template is appended.
    """

    if op == CLICK or payload is None:
        return description
    if extract_payload(description, op) == payload:
        return description
    with_text, bare = _DESCRIPTION_TEMPLATES[op]
    trimmed = description.strip().rstrip(".").strip()
    if not trimmed:
        text = bare.format(payload=payload)
        if extract_payload(text, op) == payload:
            return text
        trimmed = _EMPTY_DESCRIPTIONS[op]
    return with_text.format(description=trimmed, payload=payload)


def _template_payload(description: str) -> Optional[str]:
    text = description.rstrip()
    if not text.endswith('"'):
        return None
    lowered = text.lower()
    start = max(lowered.rfind(f": {verb} \"") for verb in _TEMPLATE_VERBS)
    if start < 0:
        return None
    opening = text.index('"', start)
    if opening == len(text) - 1:
        return None
    return text[opening + 1 : -1]


def extract_payload(description: str, op: str) -> Optional[str]:
    """Typed text or key combo named in a Description.

    Tried in order: the appended template, the last ``type "..."``/``press "..."`` phrase, and the
    first quoted string.
    """

    if op == CLICK:
        return None
    payload = _template_payload(description)
    if payload is not None:
        return payload
    verbs = _VERB_PAYLOAD.findall(description)
    if verbs:
        return verbs[-1]
    quoted = _QUOTED.search(description)
    return quoted.group(1) if quoted else None


def format_action(a: Action) -> str:
    return (
        f"{a.index}.\n"
        f"Description: {a.description}\n"
        f"Action: {a.op}\n"
        f"Node: {a.node}\n"
        f"Target: {a.target}\n"
    )


def parse_action(text: str) -> Action:
    """Read the first five-line block in ``text``.

    Blank lines, surrounding whitespace and a missing index line are
    tolerated. Reading stops at the start of a second block.
    """

    fields: Dict[str, str] = {}
    index: Optional[int] = None
    diagnostics: List[str] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        match = _INDEX_LINE.match(line)
        if match:
            if fields or index is not None:
                break
            index = int(match.group(1))
            continue
        label, sep, value = line.partition(":")
        if sep and label in _FIELDS:
            if label in fields:
                break
            fields[label] = value.strip()
            continue
        if "Description" in fields and not any(
            name in fields for name in ("Action", "Node", "Target")
        ):
            # wrapped description text
            fields["Description"] = f"{fields['Description']} {line}"
            continue
        if "Target" in fields:
            fields["Target"] = f"{fields['Target']}{line}"
            continue
        diagnostics.append(f"line {number}: unexpected text {line[:60]!r}")

    for required in ("Action", "Node"):
        if required not in fields:
            diagnostics.append(f"missing '{required}:' line")
    if "Action" not in fields or "Node" not in fields:
        raise ActionParseError("Could not parse action", diagnostics)

    op = fields["Action"]
    if op not in ACTION_SPACE:
        raise ActionParseError("Could not parse action", [f"unknown operation {op!r}"])
    try:
        node = int(fields["Node"])
    except ValueError as exc:
        raise ActionParseError(
            "Could not parse action", [f"node is not an integer: {fields['Node']!r}"]
        ) from exc
    if node < 0:
        raise ActionParseError("Could not parse action", [f"negative node id {node}"])
    if index is not None and index < 1:
        raise ActionParseError("Could not parse action", [f"invalid index {index}"])

    description = fields.get("Description", "")
    return Action(
        index=index or 1,
        description=description,
        op=op,
        node=node,
        target=fields.get("Target", ""),
        payload=extract_payload(description, op),
    )


def format_history(history: Sequence[Action]) -> str:
    """Concatenated blocks, renumbered 1..n by position."""

    return "".join(
        format_action(replace(action, index=position))
        for position, action in enumerate(history, start=1)
    )


def parse_history(text: str) -> List[Action]:
    """Read consecutive five-line blocks, each of which must start with its index line."""

    blocks: List[List[str]] = []
    for line in text.splitlines():
        if _INDEX_LINE.match(line.strip()):
            blocks.append([])
        if line.strip() and not blocks:
            raise ActionParseError("Could not parse history", ["text before the first index line"])
        if blocks:
            blocks[-1].append(line)
    return [parse_action("\n".join(block)) for block in blocks]


def build_prompt(
    objective: str, url: str, serialized_dom: str, history: Sequence[Action]
) -> str:
    return (
        f"Objective: {objective}\n"
        f"URL: {url}\n"
        f"Observation: {serialized_dom}\n"
        "Step-by-step guide:\n"
        f"{format_history(history)}"
    )


def build_chat_messages(prompt: str, system: Optional[str] = None) -> List[Dict[str, str]]:
    """Chat messages for a general-purpose model, led by the baseline instructions."""

    instructions = system if system is not None else get_template("baseline")
    return [
        {"role": "system", "content": instructions},
        {"role": "user", "content": prompt},
    ]
