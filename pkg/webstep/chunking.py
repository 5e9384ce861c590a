"""Token-budgeted sequential chunking of a serialized DOM."""
from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass
from typing import Deque, FrozenSet, List, Optional, Sequence, Tuple

from .tokenizer import TokenizerProfile

LOGGER = logging.getLogger(__name__)

MIN_BUDGET = 64
GENERATION_RESERVE = 512

_PIECES = re.compile(r"<[^<]*|[^<]+")
_NODE_ID = re.compile(r'(?<![\w-])node="([0-9]+)"')
_WORDS = re.compile(r"\s*\S+\s*|\s+")


class ChunkingError(ValueError):
    def __init__(self, message: str, node_id: Optional[int] = None) -> None:
        super().__init__(message)
        self.node_id = node_id


class TargetNotFound(LookupError):
    pass


@dataclass(frozen=True, slots=True)
class Chunk:
    index: int
    text: str
    token_count: int
    node_ids: FrozenSet[int] = frozenset()

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.node_ids


@dataclass(frozen=True, slots=True)
class _Segment:
    text: str
    tokens: int
    node_id: Optional[int] = None


def _segments(serialized: str, tok: TokenizerProfile, budget: int) -> List[_Segment]:
    """One segment per tag together with the text that follows it."""

    segments: List[_Segment] = []
    last_node: Optional[int] = None
    for match in _PIECES.finditer(serialized):
        piece = match.group(0)
        tag, text = piece, ""
        if piece.startswith("<"):
            end = piece.find(">")
            if end >= 0:
                tag, text = piece[: end + 1], piece[end + 1 :]
            node_id = None
            if not tag.startswith("</"):
                found = _NODE_ID.search(tag)
                node_id = int(found.group(1)) if found else None
        else:
            tag, text, node_id = "", piece, None
        if node_id is not None:
            last_node = node_id

        count = tok.count(piece)
        if count <= budget:
            segments.append(_Segment(piece, count, node_id))
            continue
        if tag:
            tag_count = tok.count(tag)
            if tag_count > budget:
                raise ChunkingError(
                    f"Tag of {tag_count} tokens exceeds the chunk budget of {budget}",
                    node_id if node_id is not None else last_node,
                )
            segments.append(_Segment(tag, tag_count, node_id))
        if text:
            segments.extend(_split_text(text, tok, budget, last_node))
    return segments


def _split_text(
    text: str, tok: TokenizerProfile, budget: int, node_id: Optional[int]
) -> List[_Segment]:
    """Break an oversized text run at whitespace into pieces that fit."""

    parts: List[_Segment] = []
    current = ""
    for match in _WORDS.finditer(text):
        word = match.group(0)
        candidate = current + word
        if tok.count(candidate) <= budget:
            current = candidate
            continue
        if not current or tok.count(word) > budget:
            raise ChunkingError(
                f"Text without whitespace exceeds the chunk budget of {budget}", node_id
            )
        parts.append(_Segment(current, tok.count(current)))
        current = word
    if current:
        parts.append(_Segment(current, tok.count(current)))
    return parts


def _close(
    current: List[_Segment], tok: TokenizerProfile, budget: int
) -> Tuple[List[_Segment], List[_Segment], int]:
    """Trim ``current`` until its exact token count fits; returns kept, leftover, count."""

    kept = list(current)
    leftover: List[_Segment] = []
    count = tok.count("".join(segment.text for segment in kept))
    while count > budget and len(kept) > 1:
        leftover.insert(0, kept.pop())
        count = tok.count("".join(segment.text for segment in kept))
    return kept, leftover, count


def chunk_dom(serialized: str, tok: TokenizerProfile, budget: int) -> List[Chunk]:
    """Split ``serialized`` into consecutive chunks of at most ``budget`` tokens.

    Splits happen right before a tag, or at whitespace inside a text run too
    large for one chunk. Every opening tag lies in exactly one chunk and the
    chunk texts concatenate to the input.
    """

    if budget < MIN_BUDGET:
        raise ChunkingError(f"Chunk budget must be at least {MIN_BUDGET}, got {budget}")
    if not serialized:
        return [Chunk(index=0, text="", token_count=0)]

    queue: Deque[_Segment] = deque(_segments(serialized, tok, budget))
    chunks: List[Chunk] = []
    current: List[_Segment] = []
    estimate = 0

    def emit() -> None:
        nonlocal current, estimate
        kept, leftover, count = _close(current, tok, budget)
        queue.extendleft(reversed(leftover))
        chunks.append(
            Chunk(
                index=len(chunks),
                text="".join(segment.text for segment in kept),
                token_count=count,
                node_ids=frozenset(s.node_id for s in kept if s.node_id is not None),
            )
        )
        current = []
        estimate = 0

    while queue or current:
        if not queue:
            emit()
            continue
        segment = queue.popleft()
        if current and estimate + segment.tokens > budget:
            queue.appendleft(segment)
            emit()
            continue
        current.append(segment)
        estimate += segment.tokens

    LOGGER.debug("Split %d characters into %d chunks", len(serialized), len(chunks))
    return chunks


def select_training_chunk(chunks: Sequence[Chunk], target_id: int) -> Chunk:
    """The earliest chunk holding the target's opening tag."""

    for chunk in chunks:
        if target_id in chunk.node_ids:
            return chunk
    raise TargetNotFound(f"Node {target_id} is not in any of {len(chunks)} chunks")


def select_inference_chunk(chunks: Sequence[Chunk]) -> Chunk:
    if not chunks:
        raise ChunkingError("No chunks to choose from")
    return chunks[-1]


def solvable(chunk: Chunk, target_id: int) -> bool:
    return target_id in chunk.node_ids


def chunk_budget(
    tok: TokenizerProfile,
    prompt_overhead: str,
    context_window: int,
    reserve: int = GENERATION_RESERVE,
) -> int:
    """Tokens left for the observation once the prompt text and generation are paid for."""

    budget = context_window - tok.count(prompt_overhead) - reserve
    if budget < MIN_BUDGET:
        raise ChunkingError(
            f"Context window {context_window} leaves only {budget} tokens for the DOM"
        )
    return budget
