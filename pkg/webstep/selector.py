"""A small CSS selector dialect for locating recorded action targets.

Supported: ``tag``, ``#id``, ``.class``, ``[attr="v"]`` (also single-quoted or
bare values) and the descendant (space) and child (``>``) combinators.
Backslash escapes, including hex escapes such as ``#\\31 23``, are honoured.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Set, Tuple, Union

from .dom import DomNode, DomTree, PrunedDom, index_elements

LOGGER = logging.getLogger(__name__)

DESCENDANT = " "
CHILD = ">"

_NAME_CHARS = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_")
_HEX = frozenset("0123456789abcdefABCDEF")


class SelectorError(ValueError):
    """Base class for selector problems."""

    def __init__(self, message: str, selector: str = "") -> None:
        super().__init__(message)
        self.selector = selector


class UnsupportedSelector(SelectorError):
    def __init__(self, token: str, selector: str) -> None:
        super().__init__(f"Unsupported selector feature {token!r} in {selector!r}", selector)
        self.token = token


class InvalidSelector(SelectorError):
    """The selector matches no element."""


class AmbiguousSelector(SelectorError):
    def __init__(self, selector: str, count: int) -> None:
        super().__init__(f"Selector {selector!r} matches {count} elements", selector)
        self.count = count


@dataclass(frozen=True, slots=True)
class CompoundSelector:
    tag: Optional[str] = None
    element_id: Optional[str] = None
    classes: Tuple[str, ...] = ()
    attributes: Tuple[Tuple[str, str], ...] = ()

    def matches(self, node: DomNode) -> bool:
        if self.tag is not None and node.tag != self.tag:
            return False
        attrs = node.attributes
        if self.element_id is not None and attrs.get("id") != self.element_id:
            return False
        if self.classes:
            present = attrs.get("class", "").split()
            if any(name not in present for name in self.classes):
                return False
        return all(attrs.get(name) == value for name, value in self.attributes)


@dataclass(frozen=True, slots=True)
class Selector:
    """Compound steps joined left to right by ``combinators``."""

    steps: Tuple[CompoundSelector, ...]
    combinators: Tuple[str, ...] = ()
    text: str = ""

    def __post_init__(self) -> None:
        if not self.steps:
            raise SelectorError("Selector needs at least one step", self.text)
        if len(self.combinators) != len(self.steps) - 1:
            raise SelectorError("Combinator count does not match step count", self.text)


class _SelectorParser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def _peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def _skip_whitespace(self) -> bool:
        start = self.pos
        while self._peek().isspace():
            self.pos += 1
        return self.pos > start

    def _error(self, message: str) -> SelectorError:
        return SelectorError(f"{message} at position {self.pos} in {self.text!r}", self.text)

    def _unsupported(self) -> UnsupportedSelector:
        start = self.pos
        ch = self.text[start]
        end = start + 1
        if ch == ":":
            while end < len(self.text) and self.text[end] == ":":
                end += 1
            while end < len(self.text) and (self.text[end] in _NAME_CHARS or self.text[end] == "("):
                if self.text[end] == "(":
                    close = self.text.find(")", end)
                    end = len(self.text) if close < 0 else close + 1
                    break
                end += 1
        return UnsupportedSelector(self.text[start:end], self.text)

    def _read_escape(self) -> str:
        self.pos += 1  # backslash
        if self.pos >= len(self.text):
            raise self._error("Dangling escape")
        digits = ""
        while len(digits) < 6 and self._peek() in _HEX:
            digits += self._peek()
            self.pos += 1
        if digits:
            if self._peek().isspace():
                self.pos += 1
            return chr(int(digits, 16))
        ch = self.text[self.pos]
        self.pos += 1
        return ch

    def _read_name(self) -> str:
        out: List[str] = []
        while True:
            ch = self._peek()
            if ch == "\\":
                out.append(self._read_escape())
            elif ch and (ch in _NAME_CHARS or ord(ch) > 127):
                out.append(ch)
                self.pos += 1
            else:
                break
        if not out:
            raise self._error("Expected a name")
        return "".join(out)

    def _read_string(self, quote: str) -> str:
        self.pos += 1
        out: List[str] = []
        while True:
            ch = self._peek()
            if not ch:
                raise self._error("Unterminated string")
            if ch == quote:
                self.pos += 1
                return "".join(out)
            if ch == "\\":
                out.append(self._read_escape())
            else:
                out.append(ch)
                self.pos += 1

    def _read_attribute(self) -> Tuple[str, str]:
        start = self.pos
        self.pos += 1  # [
        self._skip_whitespace()
        name = self._read_name().lower()
        self._skip_whitespace()
        ch = self._peek()
        if ch != "=":
            if ch and ch in "^$*~|":
                raise UnsupportedSelector(ch + "=", self.text)
            if ch == "]":
                raise UnsupportedSelector(self.text[start : self.pos + 1], self.text)
            raise self._error("Expected '=' in attribute test")
        self.pos += 1
        self._skip_whitespace()
        quote = self._peek()
        if quote in ("'", '"'):
            value = self._read_string(quote)
        else:
            value = self._read_name()
        self._skip_whitespace()
        if self._peek() != "]":
            raise self._error("Expected ']'")
        self.pos += 1
        return name, value

    def _read_compound(self) -> CompoundSelector:
        tag: Optional[str] = None
        element_id: Optional[str] = None
        classes: List[str] = []
        attributes: List[Tuple[str, str]] = []
        constraints = 0
        while True:
            ch = self._peek()
            if not ch or ch.isspace() or ch == ">":
                break
            if ch == "#":
                self.pos += 1
                new_id = self._read_name()
                if element_id is not None and element_id != new_id:
                    # a second id becomes a plain attribute test
                    attributes.append(("id", new_id))
                else:
                    element_id = new_id
            elif ch == ".":
                self.pos += 1
                classes.append(self._read_name())
            elif ch == "[":
                attributes.append(self._read_attribute())
            elif ch in ":+~,*()":
                raise self._unsupported()
            elif constraints == 0 and (ch in _NAME_CHARS or ch == "\\" or ord(ch) > 127):
                tag = self._read_name().lower()
            else:
                raise self._unsupported()
            constraints += 1
        if constraints == 0:
            raise self._error("Expected a selector step")
        return CompoundSelector(
            tag=tag,
            element_id=element_id,
            classes=tuple(classes),
            attributes=tuple(attributes),
        )

    def parse(self) -> Selector:
        self._skip_whitespace()
        if not self._peek():
            raise SelectorError("Empty selector", self.text)
        steps = [self._read_compound()]
        combinators: List[str] = []
        while True:
            had_space = self._skip_whitespace()
            ch = self._peek()
            if not ch:
                break
            if ch == ">":
                self.pos += 1
                self._skip_whitespace()
                combinators.append(CHILD)
            elif ch in "+~,":
                raise self._unsupported()
            elif had_space:
                combinators.append(DESCENDANT)
            else:
                raise self._unsupported()
            steps.append(self._read_compound())
        return Selector(steps=tuple(steps), combinators=tuple(combinators), text=self.text)


def parse_selector(text: str) -> Selector:
    return _SelectorParser(text).parse()


DomLike = Union[DomTree, PrunedDom]


def _root(dom: DomLike) -> DomTree:
    return dom.root if isinstance(dom, PrunedDom) else dom


def resolve(sel: Union[Selector, str], dom: DomLike) -> List[DomNode]:
    """All elements matching ``sel``, in document order, without duplicates."""

    if isinstance(sel, str):
        sel = parse_selector(sel)
    order, parents = index_elements(_root(dom))
    current: Set[int] = {id(node) for node in order if sel.steps[0].matches(node)}
    for combinator, step in zip(sel.combinators, sel.steps[1:]):
        if not current:
            break
        following: Set[int] = set()
        if combinator == CHILD:
            for node in order:
                parent = parents[id(node)]
                if parent is not None and id(parent) in current and step.matches(node):
                    following.add(id(node))
        else:
            # inside[x]: some proper ancestor of x is in ``current``.
            inside: Dict[int, bool] = {}
            for node in order:
                parent = parents[id(node)]
                flag = parent is not None and (id(parent) in current or inside[id(parent)])
                inside[id(node)] = flag
                if flag and step.matches(node):
                    following.add(id(node))
        current = following
    return [node for node in order if id(node) in current]


def resolve_unique(sel: Union[Selector, str], dom: DomLike) -> DomNode:
    if isinstance(sel, str):
        sel = parse_selector(sel)
    matches = resolve(sel, dom)
    if not matches:
        raise InvalidSelector(f"Selector {sel.text!r} matches no element", sel.text)
    if len(matches) > 1:
        raise AmbiguousSelector(sel.text, len(matches))
    return matches[0]
