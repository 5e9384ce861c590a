"""Step judgments, aggregate metrics and the refined evaluation rules."""
from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .actions import CLICK, TYPE, Action, ActionParseError, extract_payload, parse_action
from .dom import DomNode, PrunedDom, text_content

LOGGER = logging.getLogger(__name__)

TEXT_ENTRY_TAGS = frozenset({"input", "textarea"})
# Attribute fallbacks for elements without visible text, in priority order.
TEXT_ATTRIBUTES = ("aria-label", "placeholder", "title", "alt", "value")


class EvaluationError(ValueError):
    pass


class EvalMode(str, Enum):
    STRICT = "strict"
    REFINED = "refined"


@dataclass(frozen=True, slots=True)
class StepJudgment:
    element_correct: bool
    op_correct: bool
    action_f1: float
    solvable: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.action_f1 <= 1.0:
            raise ValueError(f"action_f1 must lie in [0, 1], got {self.action_f1!r}")
        if self.element_correct and not self.solvable:
            raise ValueError("An unsolvable step cannot be element-correct")

    @property
    def success(self) -> bool:
        return self.element_correct and self.op_correct


WRONG = StepJudgment(element_correct=False, op_correct=False, action_f1=0.0, solvable=True)


# ---------------------------------------------------------------------------
# Refined rules


def relax_labels(gold_node: int, dom: PrunedDom) -> Set[int]:
    """The gold node plus its children and grandchildren."""

    if gold_node not in dom:
        raise EvaluationError(f"Gold node {gold_node} is not in the DOM")
    relaxed = {gold_node}
    for child in dom.children_ids(gold_node):
        relaxed.add(child)
        relaxed.update(dom.children_ids(child))
    return relaxed


def visible_text(node: DomNode) -> str:
    text = text_content(node)
    if text:
        return text
    for name in TEXT_ATTRIBUTES:
        value = " ".join(node.attributes.get(name, "").split())
        if value:
            return value
    return ""


def attribute_match(pred_node: int, gold_node: int, dom: PrunedDom) -> bool:
    """Same tag and the same non-empty, whitespace-collapsed text."""

    if pred_node not in dom or gold_node not in dom:
        return False
    pred, gold = dom.node(pred_node), dom.node(gold_node)
    if pred.tag != gold.tag:
        return False
    text = visible_text(gold)
    return bool(text) and visible_text(pred) == text


def adjust_click_to_type(pred: Action, dom: PrunedDom) -> Action:
    """Clicks on text-entry elements become typing actions."""

    if pred.op != CLICK or pred.node not in dom:
        return pred
    if dom.node(pred.node).tag not in TEXT_ENTRY_TAGS:
        return pred
    payload = extract_payload(pred.description, TYPE) or ""
    return replace(pred, op=TYPE, payload=payload)


def multistage_remap(
    generated_node: int, ranked_elements: Sequence[int], dom: PrunedDom
) -> int:
    """First ranked element that contains (or is) the generated node."""

    if generated_node not in dom:
        return generated_node
    for candidate in ranked_elements:
        if candidate in dom and dom.is_descendant(generated_node, candidate):
            return candidate
    return generated_node


# ---------------------------------------------------------------------------
# Judging


def _payload_tokens(action: Action) -> List[str]:
    return (action.payload or "").split()


def action_f1(pred: Action, gold: Action) -> float:
    """Token F1 over payloads; zero when the operations differ."""

    if pred.op != gold.op:
        return 0.0
    pred_tokens = _payload_tokens(pred)
    gold_tokens = _payload_tokens(gold)
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def judge_step(
    pred: Optional[Action],
    gold: Action,
    solvable: bool = True,
    mode: EvalMode = EvalMode.STRICT,
    dom: Optional[PrunedDom] = None,
) -> StepJudgment:
    """Judge one prediction. A missing prediction is simply wrong."""

    if pred is None:
        return replace(WRONG, solvable=solvable)
    if mode is EvalMode.REFINED:
        if dom is None:
            raise EvaluationError("Refined evaluation needs the observation DOM")
        pred = adjust_click_to_type(pred, dom)
        element_match = (
            gold.node in dom and pred.node in relax_labels(gold.node, dom)
        ) or attribute_match(pred.node, gold.node, dom)
    else:
        element_match = pred.node == gold.node

    op_correct = pred.op == gold.op
    if op_correct and gold.op == TYPE:
        op_correct = (pred.payload or "").strip() == (gold.payload or "").strip()
    return StepJudgment(
        element_correct=solvable and element_match,
        op_correct=op_correct,
        action_f1=action_f1(pred, gold),
        solvable=solvable,
    )


# ---------------------------------------------------------------------------
# Aggregation


@dataclass(slots=True)
class Tally:
    """Additive counts behind an :class:`EvalReport`."""

    steps: int = 0
    solvable_steps: int = 0
    correct_elements: int = 0
    successful_steps: int = 0
    f1_sum: float = 0.0
    tasks: int = 0
    successful_tasks: int = 0

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(
            steps=self.steps + other.steps,
            solvable_steps=self.solvable_steps + other.solvable_steps,
            correct_elements=self.correct_elements + other.correct_elements,
            successful_steps=self.successful_steps + other.successful_steps,
            f1_sum=self.f1_sum + other.f1_sum,
            tasks=self.tasks + other.tasks,
            successful_tasks=self.successful_tasks + other.successful_tasks,
        )

    @classmethod
    def of_task(cls, judgments: Sequence[StepJudgment]) -> "Tally":
        return cls(
            steps=len(judgments),
            solvable_steps=sum(j.solvable for j in judgments),
            correct_elements=sum(j.element_correct for j in judgments),
            successful_steps=sum(j.success for j in judgments),
            f1_sum=sum(j.action_f1 for j in judgments),
            tasks=1,
            successful_tasks=int(bool(judgments) and all(j.success for j in judgments)),
        )


@dataclass(frozen=True, slots=True)
class EvalReport:
    """Aggregate metrics. ``cem`` is ``None`` when no step was solvable."""

    em: float
    cem: Optional[float]
    element_accuracy: float
    mean_action_f1: float
    step_sr: float
    task_sr: float
    steps: int
    solvable_steps: int
    tasks: int
    successful_tasks: int

    @classmethod
    def from_tally(cls, tally: Tally) -> "EvalReport":
        if tally.steps == 0:
            raise EvaluationError("Cannot aggregate zero judgments")
        em = tally.correct_elements / tally.steps
        return cls(
            em=em,
            cem=(
                tally.correct_elements / tally.solvable_steps if tally.solvable_steps else None
            ),
            element_accuracy=em,
            mean_action_f1=tally.f1_sum / tally.steps,
            step_sr=tally.successful_steps / tally.steps,
            task_sr=tally.successful_tasks / tally.tasks,
            steps=tally.steps,
            solvable_steps=tally.solvable_steps,
            tasks=tally.tasks,
            successful_tasks=tally.successful_tasks,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "em": self.em,
            "cem": self.cem,
            "element_accuracy": self.element_accuracy,
            "mean_action_f1": self.mean_action_f1,
            "step_sr": self.step_sr,
            "task_sr": self.task_sr,
            "steps": self.steps,
            "solvable_steps": self.solvable_steps,
            "tasks": self.tasks,
            "successful_tasks": self.successful_tasks,
        }


def tally(judgments: Mapping[str, Sequence[StepJudgment]]) -> Tally:
    total = Tally()
    for task_judgments in judgments.values():
        total = total + Tally.of_task(task_judgments)
    return total


def aggregate(judgments: Mapping[str, Sequence[StepJudgment]]) -> EvalReport:
    """Metrics over judgments grouped by task."""

    if not judgments or not any(judgments.values()):
        raise EvaluationError("Cannot aggregate an empty set of judgments")
    return EvalReport.from_tally(tally(judgments))


# ---------------------------------------------------------------------------
# Files


@dataclass(slots=True)
class StepRecord:
    workflow_id: str
    step_index: int
    judgment: StepJudgment
    remapped: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "workflow_id": self.workflow_id,
            "step_index": self.step_index,
            "element_correct": self.judgment.element_correct,
            "op_correct": self.judgment.op_correct,
            "action_f1": self.judgment.action_f1,
            "solvable": self.judgment.solvable,
            "remapped": self.remapped,
        }


@dataclass(slots=True)
class EvaluationRun:
    report: EvalReport
    records: List[StepRecord] = field(default_factory=list)
    unparsable_predictions: int = 0
    missing_predictions: int = 0


def _read_jsonl(path: str | os.PathLike[str]) -> Iterable[Tuple[int, Dict[str, Any]]]:
    file_path = Path(path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise EvaluationError(f"Could not read {file_path}") from exc
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EvaluationError(f"{file_path}:{number}: invalid JSON ({exc.msg})") from exc
        if not isinstance(row, dict):
            raise EvaluationError(f"{file_path}:{number}: expected a JSON object")
        yield number, row


def _key(row: Mapping[str, Any]) -> Tuple[str, int]:
    return str(row["workflow_id"]), int(row["step_index"])


def _ranked_nodes(row: Mapping[str, Any], gold_row: Mapping[str, Any]) -> List[int]:
    """Ranker entries are backend IDs when the gold row has a ``backend_map``."""

    backend_map = gold_row.get("backend_map")
    ranked: List[int] = []
    for entry in row.get("ranked", []):
        if backend_map is not None:
            mapped = backend_map.get(str(entry))
            if mapped is not None:
                ranked.append(int(mapped))
        else:
            ranked.append(int(entry))
    return ranked


def evaluate_files(
    gold_path: str | os.PathLike[str],
    predictions_path: str | os.PathLike[str],
    mode: EvalMode = EvalMode.STRICT,
    ranker_path: str | os.PathLike[str] | None = None,
) -> EvaluationRun:
    """Judge a predictions JSONL against a gold JSONL.

    Gold rows: ``{workflow_id, step_index, action_text}`` plus an optional
    serialized ``observation`` chunk (enables the solvability check and the
    refined rules), an explicit ``solvable`` flag and a ``backend_map``.
    """

    predictions: Dict[Tuple[str, int], Dict[str, Any]] = {}
    for _, row in _read_jsonl(predictions_path):
        predictions[_key(row)] = row
    rankings: Dict[Tuple[str, int], Dict[str, Any]] = {}
    if ranker_path is not None:
        for _, row in _read_jsonl(ranker_path):
            rankings[_key(row)] = row

    grouped: Dict[str, List[StepJudgment]] = {}
    records: List[StepRecord] = []
    unparsable = 0
    missing = 0
    seen: Set[Tuple[str, int]] = set()
    for number, gold_row in _read_jsonl(gold_path):
        key = _key(gold_row)
        seen.add(key)
        try:
            gold = parse_action(str(gold_row["action_text"]))
        except (KeyError, ActionParseError) as exc:
            raise EvaluationError(f"{gold_path}:{number}: unusable gold action: {exc}") from exc

        observation = gold_row.get("observation")
        dom = PrunedDom.from_serialized(observation) if observation else None
        if "solvable" in gold_row:
            solvable = bool(gold_row["solvable"])
        elif dom is not None:
            solvable = gold.node in dom
        else:
            solvable = True

        pred: Optional[Action] = None
        pred_row = predictions.get(key)
        if pred_row is None:
            missing += 1
            LOGGER.warning("No prediction for %s step %d", *key)
        else:
            try:
                pred = parse_action(str(pred_row.get("action_text", "")))
            except ActionParseError as exc:
                unparsable += 1
                LOGGER.warning("Unparsable prediction for %s step %d: %s", key[0], key[1], exc)

        remapped = False
        ranking = rankings.get(key)
        if pred is not None and ranking is not None and dom is not None:
            new_node = multistage_remap(pred.node, _ranked_nodes(ranking, gold_row), dom)
            if new_node != pred.node:
                target = dom.opening_tag(new_node)
                pred = replace(pred, node=new_node, target=target)
                remapped = True

        judgment = judge_step(pred, gold, solvable=solvable, mode=mode, dom=dom)
        grouped.setdefault(key[0], []).append(judgment)
        records.append(StepRecord(key[0], key[1], judgment, remapped))

    extra = set(predictions) - seen
    if extra:
        LOGGER.warning("Ignoring %d predictions without a gold step", len(extra))
    report = aggregate(grouped)
    LOGGER.info("Evaluated %d steps over %d tasks (%s mode)", report.steps, report.tasks, mode.value)
    return EvaluationRun(
        report=report,
        records=records,
        unparsable_predictions=unparsable,
        missing_predictions=missing,
    )
