"""HTML element trees, node-ID assignment and compact serialization."""
from __future__ import annotations

import html
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from bs4 import BeautifulSoup, Comment, Declaration, Doctype, NavigableString, Tag
from bs4.element import ProcessingInstruction

LOGGER = logging.getLogger(__name__)

NODE_ATTR = "node"
BACKEND_ATTR = "backend_node_id"

VOID_ELEMENTS = frozenset(
    {
        "area",
        "base",
        "br",
        "col",
        "embed",
        "hr",
        "img",
        "input",
        "link",
        "meta",
        "param",
        "source",
        "track",
        "wbr",
    }
)

_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True, slots=True)
class TextNode:
    text: str


@dataclass(frozen=True, slots=True)
class CommentNode:
    text: str


@dataclass(frozen=True, slots=True)
class DomNode:
    """A single element. ``source_index`` is the pre-order position in the raw page."""

    tag: str
    attributes: Mapping[str, str] = field(default_factory=dict)
    children: Tuple["Node", ...] = ()
    node_id: Optional[int] = None
    source_index: Optional[int] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.tag:
            raise ValueError("Element tag cannot be empty")
        if self.node_id is not None and self.node_id < 0:
            raise ValueError(f"Invalid node id: {self.node_id!r}")

    def element_children(self) -> Iterator["DomNode"]:
        for child in self.children:
            if isinstance(child, DomNode):
                yield child


Node = Union[DomNode, TextNode, CommentNode]


@dataclass(frozen=True, slots=True)
class DomTree:
    """Document root: an ordered list of top-level nodes."""

    children: Tuple[Node, ...] = ()

    def iter_elements(self) -> Iterator[DomNode]:
        """Yield every element in document (pre-)order."""

        stack: List[Node] = list(reversed(self.children))
        while stack:
            node = stack.pop()
            if isinstance(node, DomNode):
                yield node
                stack.extend(reversed(node.children))


def index_elements(tree: DomTree) -> Tuple[List[DomNode], Dict[int, Optional[DomNode]]]:
    """Elements in document order plus a parent map keyed by ``id(element)``.

    Frozen nodes compare by value, so identity is the only safe key.
    """

    order: List[DomNode] = []
    parents: Dict[int, Optional[DomNode]] = {}
    stack: List[Tuple[Node, Optional[DomNode]]] = [
        (child, None) for child in reversed(tree.children)
    ]
    while stack:
        node, parent = stack.pop()
        if not isinstance(node, DomNode):
            continue
        order.append(node)
        parents[id(node)] = parent
        stack.extend((child, node) for child in reversed(node.children))
    return order, parents


def collapse_whitespace(text: str) -> str:
    return _WHITESPACE.sub(" ", text)


def text_content(node: Node) -> str:
    """Concatenated descendant text, whitespace-collapsed and stripped."""

    parts: List[str] = []
    stack: List[Node] = [node]
    while stack:
        current = stack.pop()
        if isinstance(current, TextNode):
            parts.append(current.text)
        elif isinstance(current, DomNode):
            stack.extend(reversed(current.children))
    return collapse_whitespace("".join(parts)).strip()


# ---------------------------------------------------------------------------
# Parsing


def parse_html(text: str) -> DomTree:
    """Parse ``text`` into a :class:`DomTree`.

    The parser never fails: unclosed tags are closed at their parent's
    boundary and stray markup degrades to text. Declarations, doctypes and
    processing instructions are discarded; comments are kept so that
    pruning can remove them.
    """

    if not text:
        return DomTree()
    soup = BeautifulSoup(text, "html.parser", multi_valued_attributes=None)
    counter = [0]
    return DomTree(children=_convert_children(soup, counter))


def _convert_children(parent: Tag, counter: List[int]) -> Tuple[Node, ...]:
    converted: List[Node] = []
    for child in parent.contents:
        if isinstance(child, Tag):
            index = counter[0]
            counter[0] += 1
            attributes = {
                str(name).lower(): "" if value is None else str(value)
                for name, value in child.attrs.items()
            }
            converted.append(
                DomNode(
                    tag=child.name.lower(),
                    attributes=attributes,
                    children=_convert_children(child, counter),
                    source_index=index,
                )
            )
        elif isinstance(child, Comment):
            converted.append(CommentNode(str(child)))
        elif isinstance(child, (Doctype, Declaration, ProcessingInstruction)):
            continue
        elif isinstance(child, NavigableString):
            converted.append(TextNode(str(child)))
    return tuple(converted)


# ---------------------------------------------------------------------------
# Node IDs


@dataclass(frozen=True, slots=True)
class PrunedDom:
    """A pruned tree whose elements all carry unique node IDs.

    ``id_index`` maps every node ID to its path of child positions from the
    document root. ``attr_order`` fixes the serialized attribute order; when
    ``None`` attributes are emitted alphabetically, which is the order the
    shipped whitelist uses.
    """

    root: DomTree
    id_index: Mapping[int, Tuple[int, ...]]
    attr_order: Optional[Tuple[str, ...]] = None
    source_index: Mapping[int, int] = field(default_factory=dict)
    backend_index: Mapping[str, int] = field(default_factory=dict)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.id_index

    def __len__(self) -> int:
        return len(self.id_index)

    def node(self, node_id: int) -> DomNode:
        try:
            path = self.id_index[node_id]
        except KeyError as exc:
            raise KeyError(f"Unknown node id: {node_id}") from exc
        current: Union[DomTree, DomNode] = self.root
        for position in path:
            current = current.children[position]  # type: ignore[assignment]
        return current  # type: ignore[return-value]

    def parent_id(self, node_id: int) -> Optional[int]:
        path = self.id_index[node_id]
        if len(path) <= 1:
            return None
        current: Union[DomTree, DomNode] = self.root
        for position in path[:-1]:
            current = current.children[position]  # type: ignore[assignment]
        return current.node_id  # type: ignore[union-attr]

    def children_ids(self, node_id: int) -> List[int]:
        return [
            child.node_id
            for child in self.node(node_id).element_children()
            if child.node_id is not None
        ]

    def is_descendant(self, node_id: int, ancestor_id: int) -> bool:
        """True when ``node_id`` equals ``ancestor_id`` or lies inside it."""

        path = self.id_index[node_id]
        ancestor_path = self.id_index[ancestor_id]
        return path[: len(ancestor_path)] == ancestor_path

    def node_for_source(self, source_index: int) -> Optional[int]:
        return self.source_index.get(source_index)

    def node_for_backend(self, backend_id: str) -> Optional[int]:
        return self.backend_index.get(str(backend_id))

    def backend_for_node(self, node_id: int) -> Optional[str]:
        return self.node(node_id).attributes.get(BACKEND_ATTR)

    def opening_tag(self, node_id: int) -> str:
        return opening_tag(self.node(node_id), self.attr_order)

    @classmethod
    def from_serialized(cls, text: str) -> "PrunedDom":
        """Rebuild a PrunedDom from annotated HTML, keeping its ``node`` values.

        Elements without a ``node`` attribute are left unnumbered and do not
        appear in ``id_index``.
        """

        tree = parse_html(text)
        id_index: Dict[int, Tuple[int, ...]] = {}

        def adopt(node: Node, path: Tuple[int, ...]) -> Node:
            if not isinstance(node, DomNode):
                return node
            children = tuple(
                adopt(child, path + (position,))
                for position, child in enumerate(node.children)
            )
            attributes = dict(node.attributes)
            raw_id = attributes.pop(NODE_ATTR, None)
            node_id: Optional[int] = None
            if raw_id is not None and raw_id.isascii() and raw_id.isdigit():
                node_id = int(raw_id)
                if node_id in id_index:
                    LOGGER.warning("Duplicate node id %s in serialized DOM", node_id)
                id_index[node_id] = path
            return replace(node, attributes=attributes, children=children, node_id=node_id)

        root = DomTree(
            children=tuple(
                adopt(child, (position,)) for position, child in enumerate(tree.children)
            )
        )
        return cls(root=root, id_index=id_index)


def assign_node_ids(
    tree: DomTree, attr_order: Optional[Sequence[str]] = None
) -> PrunedDom:
    """Number every element in post-order (deepest-leftmost first) from 0."""

    counter = [0]
    id_index: Dict[int, Tuple[int, ...]] = {}
    source_index: Dict[int, int] = {}
    backend_index: Dict[str, int] = {}

    def visit(node: Node, path: Tuple[int, ...]) -> Node:
        if not isinstance(node, DomNode):
            return node
        children = tuple(
            visit(child, path + (position,)) for position, child in enumerate(node.children)
        )
        node_id = counter[0]
        counter[0] += 1
        id_index[node_id] = path
        if node.source_index is not None:
            source_index[node.source_index] = node_id
        backend_id = node.attributes.get(BACKEND_ATTR)
        if backend_id:
            backend_index[backend_id] = node_id
        attributes = {
            name: value for name, value in node.attributes.items() if name != NODE_ATTR
        }
        return replace(node, attributes=attributes, children=children, node_id=node_id)

    root = DomTree(
        children=tuple(visit(child, (position,)) for position, child in enumerate(tree.children))
    )
    return PrunedDom(
        root=root,
        id_index=id_index,
        attr_order=tuple(attr_order) if attr_order is not None else None,
        source_index=source_index,
        backend_index=backend_index,
    )


# ---------------------------------------------------------------------------
# Serialization


def _ordered_attributes(
    node: DomNode, attr_order: Optional[Sequence[str]]
) -> List[Tuple[str, str]]:
    items = [
        (name, value)
        for name, value in node.attributes.items()
        if name not in (NODE_ATTR, BACKEND_ATTR)
    ]
    if node.node_id is not None:
        items.append((NODE_ATTR, str(node.node_id)))
    if attr_order is None:
        return sorted(items, key=lambda item: item[0])
    ranks = {name: rank for rank, name in enumerate(attr_order)}
    fallback = len(ranks)
    # sorted() is stable, so unlisted attributes keep document order.
    return sorted(items, key=lambda item: ranks.get(item[0], fallback))


def opening_tag(node: DomNode, attr_order: Optional[Sequence[str]] = None) -> str:
    parts = [node.tag]
    for name, value in _ordered_attributes(node, attr_order):
        parts.append(f'{name}="{html.escape(value, quote=True)}"')
    return "<" + " ".join(parts) + ">"


def _serialize_node(node: Node, attr_order: Optional[Sequence[str]], out: List[str]) -> None:
    if isinstance(node, TextNode):
        out.append(html.escape(node.text, quote=False))
        return
    if isinstance(node, CommentNode):
        out.append(f"<!--{node.text}-->")
        return
    out.append(opening_tag(node, attr_order))
    if node.tag in VOID_ELEMENTS and not node.children:
        return
    for child in node.children:
        _serialize_node(child, attr_order, out)
    out.append(f"</{node.tag}>")


def serialize_tree(tree: DomTree, attr_order: Optional[Sequence[str]] = None) -> str:
    out: List[str] = []
    for child in tree.children:
        _serialize_node(child, attr_order, out)
    return "".join(out)


def serialize(pd: PrunedDom) -> str:
    """Compact HTML where every element carries ``node="ID"``."""

    return serialize_tree(pd.root, pd.attr_order)
