"""Workflow recordings: loading, selector validation and training-example emission.

Wire format (JSONL, one workflow per line)::

    {"id": "wf-1", "objective": "...", "domain": "...", "subdomain": "...",
     "language": "en",
     "steps": [{"url": "...", "raw_html": "...", "description": "...",
                "op": "mouse_click_action", "selector": "...",
                "text_input": null, "key_combo": null}]}

``id``, ``domain``, ``subdomain`` and ``language`` are optional.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .actions import ACTION_SPACE, PRESS, TYPE, Action, build_prompt, describe, format_action
from .chunking import (
    GENERATION_RESERVE,
    ChunkingError,
    TargetNotFound,
    chunk_budget,
    chunk_dom,
    select_training_chunk,
)
from .dom import DomNode, PrunedDom, index_elements, parse_html, serialize
from .preprocess import preprocess_tree
from .pruning import PruneConfig, default_config
from .selector import SelectorError, resolve_unique
from .tokenizer import TokenizerProfile

LOGGER = logging.getLogger(__name__)

UNINFORMATIVE_WORDS = 3


class WorkflowFileError(RuntimeError):
    """Raised when a workflow file cannot be read at all."""


@dataclass(frozen=True, slots=True)
class Step:
    url: str
    raw_html: str
    description: str
    op: str
    selector: str
    text_input: Optional[str] = None
    key_combo: Optional[str] = None

    def __post_init__(self) -> None:
        if self.op not in ACTION_SPACE:
            raise ValueError(f"Unknown operation: {self.op!r}")
        if (self.op == TYPE) != (self.text_input is not None):
            raise ValueError("text_input must be present exactly for keyboard_sequence_action")
        if (self.op == PRESS) != (self.key_combo is not None):
            raise ValueError("key_combo must be present exactly for keyboard_combination_action")

    @property
    def payload(self) -> Optional[str]:
        if self.op == TYPE:
            return self.text_input
        if self.op == PRESS:
            return self.key_combo
        return None


@dataclass(frozen=True, slots=True)
class Workflow:
    objective: str
    steps: Tuple[Step, ...]
    workflow_id: str = ""
    domain: str = ""
    subdomain: str = ""
    language: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.objective.strip():
            raise ValueError("Workflow objective cannot be empty")
        if not self.steps:
            raise ValueError("Workflow needs at least one step")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], default_id: str = "") -> "Workflow":
        if not isinstance(data, dict):
            raise ValueError("Workflow record must be a JSON object")
        raw_steps = data.get("steps")
        if not isinstance(raw_steps, list):
            raise ValueError("Workflow record needs a 'steps' list")
        steps = []
        for position, raw in enumerate(raw_steps, start=1):
            if not isinstance(raw, dict):
                raise ValueError(f"Step {position} must be a JSON object")
            try:
                steps.append(
                    Step(
                        url=str(raw.get("url", "")),
                        raw_html=str(raw.get("raw_html", "")),
                        description=str(raw.get("description", "")),
                        op=str(raw["op"]),
                        selector=str(raw["selector"]),
                        text_input=raw.get("text_input"),
                        key_combo=raw.get("key_combo"),
                    )
                )
            except KeyError as exc:
                raise ValueError(f"Step {position} is missing field {exc.args[0]!r}") from exc
            except ValueError as exc:
                raise ValueError(f"Step {position}: {exc}") from exc
        return cls(
            objective=str(data.get("objective", "")),
            steps=tuple(steps),
            workflow_id=str(data.get("id") or default_id),
            domain=str(data.get("domain", "")),
            subdomain=str(data.get("subdomain", "")),
            language=data.get("language"),
        )


@dataclass(frozen=True, slots=True)
class RejectedLine:
    line: int
    reason: str


@dataclass(slots=True)
class LoadResult:
    workflows: List[Workflow] = field(default_factory=list)
    rejects: List[RejectedLine] = field(default_factory=list)


def read_workflows(path: str | os.PathLike[str]) -> LoadResult:
    """Parse a workflow JSONL file, collecting malformed lines instead of failing."""

    file_path = Path(path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise WorkflowFileError(f"Could not read workflow file: {file_path}") from exc

    result = LoadResult()
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            result.workflows.append(Workflow.from_dict(record, default_id=f"line-{number}"))
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            LOGGER.warning("Rejected workflow on line %d: %s", number, exc)
            result.rejects.append(RejectedLine(line=number, reason=str(exc)))
    LOGGER.info(
        "Loaded %d workflows from %s (%d rejected lines)",
        len(result.workflows),
        file_path,
        len(result.rejects),
    )
    return result


def load_workflows(path: str | os.PathLike[str]) -> List[Workflow]:
    return read_workflows(path).workflows


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True, slots=True)
class StepFailure:
    step_index: int
    selector: str
    reason: str


@dataclass(slots=True)
class ValidationResult:
    """Per-step outcome of resolving recorded selectors.

    ``doms`` holds the processed page of every step and ``targets`` the
    target node ID, or ``None`` where the selector failed, so callers do not
    preprocess the pages twice.
    """

    workflow_id: str
    failures: List[StepFailure] = field(default_factory=list)
    doms: List[Optional[PrunedDom]] = field(default_factory=list)
    targets: List[Optional[int]] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.failures

    def reasons(self) -> List[str]:
        return [f"step {f.step_index}: {f.reason}" for f in self.failures]


def locate_target(
    raw_target: DomNode,
    parents: Dict[int, Optional[DomNode]],
    pd: PrunedDom,
    config: PruneConfig,
) -> Optional[int]:
    """Node ID of a raw element after pruning.

    An element unwrapped by the tag whitelist maps to its nearest surviving
    ancestor. Elements inside a dropped subtree have no counterpart.
    """

    chain: List[DomNode] = []
    current: Optional[DomNode] = raw_target
    while current is not None:
        chain.append(current)
        current = parents[id(current)]
    if any(element.tag in config.drop_tags for element in chain):
        return None
    for element in chain:
        if element.source_index is None:
            continue
        node_id = pd.node_for_source(element.source_index)
        if node_id is not None:
            return node_id
    return None


def validate_workflow(
    w: Workflow,
    config: Optional[PruneConfig] = None,
    tok: Optional[TokenizerProfile] = None,
) -> ValidationResult:
    """Valid iff every step's selector picks out exactly one element that survives pruning.

    Selectors are resolved against the page as recorded (they may use
    attributes the whitelist removes) and the match is then mapped into the
    pruned DOM.
    """

    config = config or default_config()
    result = ValidationResult(workflow_id=w.workflow_id)
    for position, step in enumerate(w.steps, start=1):
        raw = parse_html(step.raw_html)
        pd = preprocess_tree(raw, config, tok)
        result.doms.append(pd)
        try:
            element = resolve_unique(step.selector, raw)
        except SelectorError as exc:
            result.failures.append(StepFailure(position, step.selector, str(exc)))
            result.targets.append(None)
            continue
        _, parents = index_elements(raw)
        node_id = locate_target(element, parents, pd, config)
        if node_id is None:
            result.failures.append(
                StepFailure(position, step.selector, "target removed by pruning")
            )
        result.targets.append(node_id)
    if result.failures:
        LOGGER.info("Workflow %s is invalid: %s", w.workflow_id, "; ".join(result.reasons()))
    return result


# ---------------------------------------------------------------------------
# Training examples


@dataclass(frozen=True, slots=True)
class TrainingExample:
    prompt: str
    label: str
    workflow_id: str
    step_index: int
    chunk_index: int = 0
    chunk_count: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, slots=True)
class SkippedStep:
    workflow_id: str
    step_index: int
    reason: str


def step_actions(w: Workflow, validation: ValidationResult) -> List[Action]:
    """The five-line Action of every step; requires a valid workflow."""

    actions: List[Action] = []
    for position, (step, pd, node_id) in enumerate(
        zip(w.steps, validation.doms, validation.targets), start=1
    ):
        if pd is None or node_id is None:
            raise ValueError(f"Step {position} of {w.workflow_id} has no resolved target")
        actions.append(
            Action(
                index=position,
                description=describe(step.description, step.op, step.payload),
                op=step.op,
                node=node_id,
                target=pd.opening_tag(node_id),
                payload=step.payload,
            )
        )
    return actions


def emit_training_examples(
    w: Workflow,
    tok: TokenizerProfile,
    budget: Optional[int] = None,
    *,
    context_window: Optional[int] = None,
    reserve: int = GENERATION_RESERVE,
    config: Optional[PruneConfig] = None,
    validation: Optional[ValidationResult] = None,
    skipped: Optional[List[SkippedStep]] = None,
) -> List[TrainingExample]:
    """One (prompt, label) pair per step, each prompt showing the target's chunk.

    Give either a fixed chunk ``budget`` or a ``context_window``, in which case
    each step's budget is what remains after its prompt text and ``reserve``.
    """

    if (budget is None) == (context_window is None):
        raise ValueError("Pass exactly one of budget or context_window")
    validation = validation or validate_workflow(w, config, tok)
    if not validation.valid:
        raise ValueError(f"Workflow {w.workflow_id} is invalid: {validation.reasons()}")

    actions = step_actions(w, validation)
    examples: List[TrainingExample] = []
    for position, (step, pd, action) in enumerate(
        zip(w.steps, validation.doms, actions), start=1
    ):
        history = actions[: position - 1]
        label = format_action(action)
        step_budget = budget
        try:
            if context_window is not None:
                overhead = build_prompt(w.objective, step.url, "", history) + label
                step_budget = chunk_budget(tok, overhead, context_window, reserve)
            chunks = chunk_dom(serialize(pd), tok, step_budget)
            chunk = select_training_chunk(chunks, action.node)
        except (ChunkingError, TargetNotFound) as exc:
            LOGGER.warning("Skipping step %d of %s: %s", position, w.workflow_id, exc)
            if skipped is not None:
                skipped.append(SkippedStep(w.workflow_id, position, str(exc)))
            continue
        examples.append(
            TrainingExample(
                prompt=build_prompt(w.objective, step.url, chunk.text, history),
                label=label,
                workflow_id=w.workflow_id,
                step_index=position,
                chunk_index=chunk.index,
                chunk_count=len(chunks),
            )
        )
    return examples


# ---------------------------------------------------------------------------
# Dataset build


LanguageFilter = Callable[[Workflow], bool]


def accept_all(_: Workflow) -> bool:
    return True


@dataclass(slots=True)
class WorkflowOutcome:
    workflow_id: str
    accepted: bool = False
    filtered: bool = False
    failures: List[StepFailure] = field(default_factory=list)
    examples: List[TrainingExample] = field(default_factory=list)
    skipped: List[SkippedStep] = field(default_factory=list)
    uninformative: List[Tuple[int, str]] = field(default_factory=list)
    step_count: int = 0


def process_workflow(
    w: Workflow,
    tok: TokenizerProfile,
    budget: Optional[int] = None,
    *,
    context_window: Optional[int] = None,
    reserve: int = GENERATION_RESERVE,
    config: Optional[PruneConfig] = None,
    language_filter: LanguageFilter = accept_all,
) -> WorkflowOutcome:
    outcome = WorkflowOutcome(workflow_id=w.workflow_id, step_count=len(w.steps))
    if not language_filter(w):
        LOGGER.info("Workflow %s removed by the language filter", w.workflow_id)
        outcome.filtered = True
        return outcome
    outcome.uninformative = [
        (position, step.description)
        for position, step in enumerate(w.steps, start=1)
        if len(step.description.split()) < UNINFORMATIVE_WORDS
    ]
    validation = validate_workflow(w, config, tok)
    if not validation.valid:
        outcome.failures = validation.failures
        return outcome
    outcome.accepted = True
    outcome.examples = emit_training_examples(
        w,
        tok,
        budget,
        context_window=context_window,
        reserve=reserve,
        config=config,
        validation=validation,
        skipped=outcome.skipped,
    )
    return outcome


@dataclass(slots=True)
class BuildReport:
    rejected_lines: List[RejectedLine] = field(default_factory=list)
    outcomes: List[WorkflowOutcome] = field(default_factory=list)

    @property
    def accepted(self) -> List[WorkflowOutcome]:
        return [o for o in self.outcomes if o.accepted]

    @property
    def example_count(self) -> int:
        return sum(len(o.examples) for o in self.outcomes)

    def examples(self) -> Iterable[TrainingExample]:
        for outcome in self.outcomes:
            yield from outcome.examples

    def to_dict(self) -> Dict[str, Any]:
        return {
            "workflows": len(self.outcomes),
            "accepted": len(self.accepted),
            "accepted_steps": sum(o.step_count for o in self.accepted),
            "examples": self.example_count,
            "rejected_lines": [asdict(r) for r in self.rejected_lines],
            "invalid": [
                {
                    "workflow_id": o.workflow_id,
                    "failures": [asdict(f) for f in o.failures],
                }
                for o in self.outcomes
                if o.failures
            ],
            "filtered": [o.workflow_id for o in self.outcomes if o.filtered],
            "uninformative": [
                {"workflow_id": o.workflow_id, "step_index": index, "description": text}
                for o in self.outcomes
                for index, text in o.uninformative
            ],
            "skipped_steps": [asdict(s) for s in self.skipped()],
        }

    def skipped(self) -> List[SkippedStep]:
        return [s for o in self.outcomes for s in o.skipped]


def build_dataset(
    workflows: Sequence[Workflow],
    tok: TokenizerProfile,
    budget: Optional[int] = None,
    *,
    rejected_lines: Sequence[RejectedLine] = (),
    **options: Any,
) -> BuildReport:
    """Sequential dataset build; the CLI parallelizes ``process_workflow`` itself."""

    report = BuildReport(rejected_lines=list(rejected_lines))
    for w in workflows:
        report.outcomes.append(process_workflow(w, tok, budget, **options))
    LOGGER.info(
        "Built %d examples from %d of %d workflows",
        report.example_count,
        len(report.accepted),
        len(report.outcomes),
    )
    return report


def write_examples(path: str | os.PathLike[str], examples: Iterable[TrainingExample]) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8") as handle:
        for example in examples:
            handle.write(json.dumps(example.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count
