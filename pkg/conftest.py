"""Test configuration for webstep."""
from __future__ import annotations

import json
import random
import sys
from pathlib import Path
from typing import List, Sequence, Tuple

import pytest

PROJECT_ROOT = Path(__file__).resolve().parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from webstep.tokenizer import bytes_to_unicode, load_bpe  # noqa: E402

TEST_DATA = PROJECT_ROOT / "tests" / "data"

# Merges over the byte-level alphabet; "Ġ" is the byte table's stand-in for a space.
TOY_MERGES: Tuple[Tuple[str, str], ...] = (
    ("t", "h"),
    ("th", "e"),
    ("i", "n"),
    ("in", "g"),
    ("e", "r"),
    ("a", "n"),
    ("Ġ", "t"),
    ("Ġ", "the"),
    ("o", "n"),
    ("r", "e"),
    ("e", "d"),
    ("Ġ", "a"),
    ("Ġa", "n"),
    ("an", "d"),
    ("s", "t"),
    ("b", "u"),
    ("bu", "t"),
    ("t", "on"),
    ("but", "ton"),
    ("l", "i"),
    ("li", "n"),
    ("lin", "k"),
)


def toy_tokenizer_payload() -> dict:
    """A complete byte alphabet plus every token the merges can produce."""

    vocab = {}
    for char in bytes_to_unicode().values():
        vocab[char] = len(vocab)
    for left, right in TOY_MERGES:
        vocab.setdefault(left + right, len(vocab))
    merges: List[object] = [f"{left} {right}" for left, right in TOY_MERGES[:10]]
    merges.extend([left, right] for left, right in TOY_MERGES[10:])
    return {"version": "1.0", "model": {"type": "BPE", "vocab": vocab, "merges": merges}}


def write_toy_tokenizer(path: Path) -> Path:
    path.write_text(json.dumps(toy_tokenizer_payload(), ensure_ascii=False), encoding="utf-8")
    return path


@pytest.fixture
def toy_tokenizer_path(tmp_path):
    return write_toy_tokenizer(tmp_path / "toy-tokenizer.json")


@pytest.fixture
def toy_tokenizer(toy_tokenizer_path):
    return load_bpe(toy_tokenizer_path)


# ---------------------------------------------------------------------------
# HTML generators

TAGS = ("div", "span", "a", "button", "section", "ul", "li", "p", "form", "input", "label")
CLASSES = ("nav", "item", "active", "btn", "menu", "card")
WORDS = ("home", "cart", "search", "next", "open", "the", "menu", "save")


def random_html(rng: random.Random, max_nodes: int = 40) -> str:
    """A random element tree with ids, classes and attributes drawn from small pools."""

    budget = [rng.randint(1, max_nodes)]

    def element(depth: int) -> str:
        budget[0] -= 1
        tag = rng.choice(TAGS)
        attrs = []
        if rng.random() < 0.3:
            attrs.append(f'id="e{rng.randint(0, 30)}"')
        if rng.random() < 0.5:
            attrs.append(f'class="{" ".join(rng.sample(CLASSES, rng.randint(1, 2)))}"')
        if rng.random() < 0.3:
            attrs.append(f'role="{rng.choice(("link", "tab", "img"))}"')
        opening = "<" + " ".join([tag, *attrs]) + ">"
        if tag == "input":
            return opening
        children = []
        while budget[0] > 0 and depth < 8 and rng.random() < 0.6:
            children.append(element(depth + 1))
        if rng.random() < 0.5:
            children.insert(0, rng.choice(WORDS))
        return opening + "".join(children) + f"</{tag}>"

    parts = []
    while budget[0] > 0:
        parts.append(element(0))
    return "".join(parts)


def random_selector(rng: random.Random) -> str:
    def compound() -> str:
        parts = []
        if rng.random() < 0.6:
            parts.append(rng.choice(TAGS))
        if rng.random() < 0.2:
            parts.append(f"#e{rng.randint(0, 30)}")
        if rng.random() < 0.4:
            parts.append("." + rng.choice(CLASSES))
        if rng.random() < 0.15:
            parts.append(f'[role="{rng.choice(("link", "tab", "img"))}"]')
        return "".join(parts) or rng.choice(TAGS)

    text = compound()
    for _ in range(rng.randint(0, 2)):
        text += rng.choice((" ", " > ")) + compound()
    return text


def generated_page(rng: random.Random) -> str:
    """A page in the shape recorded sites have: chrome, scripts and noisy attributes."""

    items = []
    for position in range(rng.randint(3, 9)):
        token = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz0123456789") for _ in range(40))
        items.append(
            f'<li class="item item-{position}" data-track="{token}">'
            f'<a href="/p/{position}?ref={token[:12]}" class="item-link">'
            f"{rng.choice(WORDS)} {rng.choice(WORDS)}</a></li>"
        )
    label = "".join(rng.choice("ABCDEFGHJKLMNPQRSTUVWXYZ23456789") for _ in range(48))
    return (
        "<!DOCTYPE html><html><head><title>Shop</title><style>.a{color:red}</style></head>"
        "<body><!-- header -->"
        f'<nav class="top-nav" aria-label="{label}"><a href="/" id="home">Home</a></nav>'
        '<main><form id="search"><input type="text" name="q" placeholder="Search products">'
        '<button type="submit" class="btn primary">Search</button></form>'
        f'<ul class="results">{"".join(items)}</ul></main>'
        "<script>window.track = 1;</script></body></html>"
    )


def corpus_pages(count: int = 20, seed: int = 7) -> List[str]:
    """The hand-written fixture pages followed by generated ones."""

    pages = [path.read_text(encoding="utf-8") for path in sorted((TEST_DATA / "pages").glob("*.html"))]
    rng = random.Random(seed)
    while len(pages) < count:
        pages.append(generated_page(rng))
    return pages[:count]


@pytest.fixture
def corpus() -> Sequence[str]:
    return corpus_pages()
