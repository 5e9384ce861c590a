"""Pluggable tokenizers and the character-to-token-ratio attribute filter."""
from __future__ import annotations

import json
import logging
import os
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import (
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

import regex

from .dom import BACKEND_ATTR, NODE_ATTR, DomNode, DomTree, Node, serialize_tree
from .pruning import DATA_DIR, PruneConfig

LOGGER = logging.getLogger(__name__)

DEFAULT_WORDLIST_FILE = DATA_DIR / "wordlist.txt"

# GPT-2 pre-tokenizer split.
PRETOKENIZE_PATTERN = regex.compile(
    r"""'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)
_WORD_SPLIT = re.compile(r"[^a-z]+")
_SPACE_RUNS = re.compile(r" +")


class TokenizerLoadError(ValueError):
    """Raised when a tokenizer file cannot be turned into a profile."""


class EmptyValueError(ValueError):
    """Raised when a ratio is requested for an empty string."""


class EmptyCorpusError(ValueError):
    """Raised when the pruning analysis receives no documents."""


@dataclass(frozen=True, slots=True)
class TokenizerProfile:
    """A named, deterministic ``str -> token ids`` function."""

    name: str
    encode: Callable[[str], Sequence[int]] = field(compare=False)

    def count(self, text: str) -> int:
        if not text:
            return 0
        return len(self.encode(text))


# ---------------------------------------------------------------------------
# Built-in profiles


def _whitespace_encode(text: str) -> List[int]:
    return [zlib.crc32(piece.encode("utf-8")) for piece in _SPACE_RUNS.split(text) if piece]


def _char_encode(text: str) -> List[int]:
    return [ord(ch) for ch in text]


def whitespace_profile() -> TokenizerProfile:
    """One token per run of non-space characters."""

    return TokenizerProfile(name="whitespace", encode=_whitespace_encode)


def char_profile() -> TokenizerProfile:
    """One token per character."""

    return TokenizerProfile(name="char", encode=_char_encode)


BUILTIN_PROFILES: Dict[str, Callable[[], TokenizerProfile]] = {
    "whitespace": whitespace_profile,
    "char": char_profile,
}


# ---------------------------------------------------------------------------
# Byte-level BPE


@lru_cache(maxsize=1)
def bytes_to_unicode() -> Dict[int, str]:
    """The reversible byte -> printable character table used by byte-level BPE."""

    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    codes = printable[:]
    extra = 0
    for byte in range(256):
        if byte not in printable:
            printable.append(byte)
            codes.append(256 + extra)
            extra += 1
    return {byte: chr(code) for byte, code in zip(printable, codes)}


class BytePairEncoder:
    """Applies ranked merges to byte-level pre-tokens."""

    def __init__(
        self,
        vocab: Mapping[str, int],
        merges: Sequence[Tuple[str, str]],
        unk_token: Optional[str] = None,
    ) -> None:
        self.vocab = dict(vocab)
        self.ranks: Dict[Tuple[str, str], int] = {}
        for rank, pair in enumerate(merges):
            self.ranks.setdefault(pair, rank)
        self.unk_id = self.vocab.get(unk_token, -1) if unk_token else -1
        self._byte_table = bytes_to_unicode()
        self._merge_piece = lru_cache(maxsize=65536)(self._merge_symbols)

    def _merge_symbols(self, piece: str) -> Tuple[str, ...]:
        symbols = list(piece)
        while len(symbols) > 1:
            best = min(
                zip(symbols, symbols[1:]),
                key=lambda pair: self.ranks.get(pair, float("inf")),
            )
            if best not in self.ranks:
                break
            merged: List[str] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == best:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return tuple(symbols)

    def tokenize(self, text: str) -> List[str]:
        tokens: List[str] = []
        for match in PRETOKENIZE_PATTERN.finditer(text):
            piece = "".join(self._byte_table[b] for b in match.group(0).encode("utf-8"))
            tokens.extend(self._merge_piece(piece))
        return tokens

    def encode(self, text: str) -> List[int]:
        return [self.vocab.get(token, self.unk_id) for token in self.tokenize(text)]


def _parse_merges(raw: object, source: Path) -> List[Tuple[str, str]]:
    if not isinstance(raw, list):
        raise TokenizerLoadError(f"{source}: section 'model.merges' must be a list")
    merges: List[Tuple[str, str]] = []
    for position, entry in enumerate(raw):
        if isinstance(entry, str):
            parts = entry.split(" ")
        elif isinstance(entry, list):
            parts = entry
        else:
            parts = []
        if len(parts) != 2 or not all(isinstance(p, str) and p for p in parts):
            raise TokenizerLoadError(
                f"{source}: section 'model.merges' has a malformed entry at {position}: {entry!r}"
            )
        merges.append((parts[0], parts[1]))
    return merges


def load_bpe(path: str | os.PathLike[str]) -> TokenizerProfile:
    """Load a byte-level BPE profile from a ``tokenizer.json`` style file."""

    file_path = Path(path)
    try:
        data = json.loads(file_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise TokenizerLoadError(f"Could not read tokenizer file: {file_path}") from exc
    except json.JSONDecodeError as exc:
        raise TokenizerLoadError(f"{file_path}: not valid JSON ({exc.msg})") from exc

    model = data.get("model") if isinstance(data, dict) else None
    if not isinstance(model, dict):
        raise TokenizerLoadError(f"{file_path}: missing section 'model'")
    if "vocab" not in model:
        raise TokenizerLoadError(f"{file_path}: missing section 'model.vocab'")
    if "merges" not in model:
        raise TokenizerLoadError(f"{file_path}: missing section 'model.merges'")
    vocab = model["vocab"]
    if not isinstance(vocab, dict) or not all(isinstance(v, int) for v in vocab.values()):
        raise TokenizerLoadError(
            f"{file_path}: section 'model.vocab' must map tokens to integer ids"
        )
    merges = _parse_merges(model["merges"], file_path)
    unk_token = model.get("unk_token")

    encoder = BytePairEncoder(vocab, merges, unk_token=unk_token)
    LOGGER.info(
        "Loaded BPE tokenizer %s (%d tokens, %d merges)", file_path, len(vocab), len(merges)
    )
    return TokenizerProfile(name=file_path.stem, encode=encoder.encode)


def resolve_tokenizer(spec: str) -> TokenizerProfile:
    """Return a built-in profile by name or load a tokenizer file from ``spec``."""

    factory = BUILTIN_PROFILES.get(spec)
    if factory is not None:
        return factory()
    return load_bpe(spec)


# ---------------------------------------------------------------------------
# Ratio rule


def char_token_ratio(tok: TokenizerProfile, s: str) -> float:
    if not s:
        raise EmptyValueError("Cannot compute a character-to-token ratio for an empty string")
    # A nonempty string always costs at least one token.
    return len(s) / max(1, tok.count(s))


def is_ratio_prunable(tok: TokenizerProfile, value: str, config: PruneConfig) -> bool:
    if len(value) <= config.ratio_min_len:
        return False
    return char_token_ratio(tok, value) < config.ratio_threshold


def _exempt(name: str, config: PruneConfig) -> bool:
    return name in (NODE_ATTR, BACKEND_ATTR, config.backend_attr)


def prune_attributes_by_ratio(
    tree: DomTree, tok: TokenizerProfile, config: PruneConfig
) -> DomTree:
    """Drop long attribute values that tokenize poorly; element structure is untouched."""

    def visit(node: Node) -> Node:
        if not isinstance(node, DomNode):
            return node
        attributes = {
            name: value
            for name, value in node.attributes.items()
            if _exempt(name, config) or not is_ratio_prunable(tok, value, config)
        }
        return replace(
            node,
            attributes=attributes,
            children=tuple(visit(child) for child in node.children),
        )

    return DomTree(children=tuple(visit(child) for child in tree.children))


# ---------------------------------------------------------------------------
# Analysis


@dataclass(slots=True)
class RatioReport:
    threshold: float
    pruned_pairs: Dict[Tuple[str, str], int]
    false_positive_rate: float
    chars_before: int
    chars_after: int
    tokens_before: int
    tokens_after: int
    pruned_values: int = 0
    pruned_chars: int = 0
    mean_chars_per_dom: float = 0.0
    mean_tokens_per_dom: float = 0.0

    def top_pairs(self, k: int = 10) -> List[Tuple[Tuple[str, str], int]]:
        """Most frequently pruned ``(tag, attr)`` pairs, ties broken by name."""

        ordered = sorted(self.pruned_pairs.items(), key=lambda item: (-item[1], item[0]))
        return ordered[:k]

    def to_dict(self) -> Dict[str, object]:
        return {
            "threshold": self.threshold,
            "pruned_values": self.pruned_values,
            "pruned_chars": self.pruned_chars,
            "false_positive_rate": self.false_positive_rate,
            "chars_before": self.chars_before,
            "chars_after": self.chars_after,
            "tokens_before": self.tokens_before,
            "tokens_after": self.tokens_after,
            "mean_chars_per_dom": self.mean_chars_per_dom,
            "mean_tokens_per_dom": self.mean_tokens_per_dom,
            "top_pairs": [
                {"tag": tag, "attr": attr, "count": count}
                for (tag, attr), count in self.top_pairs(len(self.pruned_pairs))
            ],
        }


def load_wordlist(path: str | os.PathLike[str] | None = None) -> FrozenSet[str]:
    """One lowercase word per line; blank lines and ``#`` comments are ignored."""

    file_path = Path(path) if path is not None else DEFAULT_WORDLIST_FILE
    words = set()
    for line in file_path.read_text(encoding="utf-8").splitlines():
        word = line.split("#", 1)[0].strip().lower()
        if word:
            words.add(word)
    return frozenset(words)


def is_false_positive(value: str, wordlist: FrozenSet[str] | set) -> bool:
    """True when ``value`` contains a dictionary word of three or more letters."""

    return any(
        len(piece) >= 3 and piece in wordlist for piece in _WORD_SPLIT.split(value.lower())
    )


def analyze_pruning(
    corpus: Iterable[DomTree],
    tok: TokenizerProfile,
    thresholds: Sequence[float],
    wordlist: FrozenSet[str] | set,
    *,
    min_len: int = 32,
) -> List[RatioReport]:
    """Measure what ratio pruning removes from ``corpus`` at each threshold."""

    documents = list(corpus)
    if not documents:
        raise EmptyCorpusError("Pruning analysis needs at least one document")
    if not wordlist:
        raise ValueError("Wordlist must not be empty")

    # (tag, attr, value, ratio) for every value long enough to be a candidate.
    candidates: List[List[Tuple[str, str, str, float]]] = []
    before_chars = 0
    before_tokens = 0
    base = PruneConfig(ratio_min_len=min_len)
    for tree in documents:
        serialized = serialize_tree(tree)
        before_chars += len(serialized)
        before_tokens += tok.count(serialized)
        found: List[Tuple[str, str, str, float]] = []
        for element in tree.iter_elements():
            for name, value in element.attributes.items():
                if _exempt(name, base) or len(value) <= min_len:
                    continue
                found.append((element.tag, name, value, char_token_ratio(tok, value)))
        candidates.append(found)

    reports: List[RatioReport] = []
    for threshold in thresholds:
        config = base.with_ratio(threshold=threshold)
        pairs: Counter[Tuple[str, str]] = Counter()
        pruned_values = 0
        pruned_chars = 0
        false_positives = 0
        for found in candidates:
            for tag, name, value, ratio in found:
                if ratio >= threshold:
                    continue
                pairs[(tag, name)] += 1
                pruned_values += 1
                pruned_chars += len(value)
                if is_false_positive(value, wordlist):
                    false_positives += 1
        after_chars = 0
        after_tokens = 0
        for tree in documents:
            serialized = serialize_tree(prune_attributes_by_ratio(tree, tok, config))
            after_chars += len(serialized)
            after_tokens += tok.count(serialized)
        report = RatioReport(
            threshold=threshold,
            pruned_pairs=dict(pairs),
            false_positive_rate=false_positives / pruned_values if pruned_values else 0.0,
            chars_before=before_chars,
            chars_after=after_chars,
            tokens_before=before_tokens,
            tokens_after=after_tokens,
            pruned_values=pruned_values,
            pruned_chars=pruned_chars,
            mean_chars_per_dom=after_chars / len(documents),
            mean_tokens_per_dom=after_tokens / len(documents),
        )
        LOGGER.info(
            "Threshold %.2f: pruned %d values, false-positive rate %.3f",
            threshold,
            pruned_values,
            report.false_positive_rate,
        )
        reports.append(report)
    return reports
