"""Sampling, voting and the refine / generate / translate / check loop."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

from .actions import (
    ACTION_SPACE,
    Action,
    ActionParseError,
    build_chat_messages,
    build_prompt,
    format_action,
    format_history,
    parse_action,
)
from .chunking import (
    Chunk,
    TargetNotFound,
    chunk_dom,
    select_inference_chunk,
    select_training_chunk,
)
from .dom import PrunedDom, collapse_whitespace, serialize
from .llm import CompletionClient, GenParams, PromptInput
from .preprocess import preprocess_html
from .prompts import TemplatePack, get_template, render_template
from .pruning import PruneConfig
from .tokenizer import TokenizerProfile

LOGGER = logging.getLogger(__name__)

DEFAULT_TOP_K = 3
SCROLL_DOWN = "down"
SCROLL_UP = "up"


class NoValidAction(RuntimeError):
    """None of the sampled completions produced a usable action."""


class EnvActionError(ValueError):
    """Raised for text that is not a command in the environment's grammar."""


# ---------------------------------------------------------------------------
# Sampling and voting


def action_is_valid(action: Action, dom: PrunedDom) -> bool:
    return action.op in ACTION_SPACE and action.node in dom


async def sample_actions(
    client: CompletionClient,
    prompt: PromptInput,
    dom: PrunedDom,
    params: GenParams,
) -> List[Action]:
    """Sample ``params.n_samples`` completions and keep the usable actions, in order."""

    completions = await client.complete(prompt, params, stage=Stage.GENERATE.value)
    return parse_samples(completions, dom)


def parse_samples(completions: Sequence[str], dom: PrunedDom) -> List[Action]:
    actions: List[Action] = []
    for sample, text in enumerate(completions):
        try:
            action = parse_action(text)
        except ActionParseError as exc:
            LOGGER.warning("Sample %d could not be parsed: %s", sample, exc)
            continue
        if not action_is_valid(action, dom):
            LOGGER.warning("Sample %d names node %d, which is not on the page", sample, action.node)
            continue
        actions.append(action)
    if not actions:
        raise NoValidAction(f"None of {len(completions)} samples produced a valid action")
    LOGGER.debug("%d of %d samples are valid", len(actions), len(completions))
    return actions


def vote_groups(actions: Sequence[Action]) -> List[List[Action]]:
    """Actions grouped by ``Action.key``, largest group first.

    Groups of equal size keep the order in which their first member was
    sampled.
    """

    groups: "OrderedDict[tuple, List[Action]]" = OrderedDict()
    for action in actions:
        groups.setdefault(action.key, []).append(action)
    return sorted(groups.values(), key=len, reverse=True)


def majority_vote(actions: Sequence[Action]) -> Action:
    if not actions:
        raise ValueError("Cannot vote on an empty list of actions")
    return vote_groups(actions)[0][0]


_CHOICE = re.compile(r"No\.?\s*(\d+)|^\s*(\d+)\b", re.IGNORECASE | re.MULTILINE)


def parse_choice(text: str, count: int) -> Optional[int]:
    """The 1-based candidate number picked in ``text``, if it is in range."""

    for match in _CHOICE.finditer(text):
        number = int(match.group(1) or match.group(2))
        if 1 <= number <= count:
            return number
    return None


async def arbitrate(
    client: CompletionClient,
    groups: Sequence[Sequence[Action]],
    *,
    objective: str,
    url: str,
    accessibility_tree: str,
    history: Sequence[Action],
    top_k: int = DEFAULT_TOP_K,
    pack: Optional[TemplatePack] = None,
    transcript: Optional[Transcript] = None,
) -> Action:
    """Let a planner model choose among the ``top_k`` largest vote groups.

    Falls back to the plain majority when there is only one candidate or the
    reply names none of them.
    """

    candidates = [group[0] for group in groups[:top_k]]
    if not candidates:
        raise ValueError("Cannot arbitrate without candidates")
    if len(candidates) == 1:
        return candidates[0]
    listing = "\n".join(
        f"No. {number}:\n{format_action(replace(action, index=len(history) + 1))}"
        for number, action in enumerate(candidates, start=1)
    )
    prompt = render_template(
        "select",
        pack,
        objective=objective,
        url=url,
        accessibility_tree=accessibility_tree,
        history=format_history(history),
        candidates=listing,
    )
    reply = (await client.complete(prompt, _single(), stage="select"))[0]
    choice = parse_choice(reply, len(candidates))
    if transcript is not None:
        transcript.record("select", prompt, [reply], f"No. {choice}" if choice else None)
    if choice is None:
        LOGGER.warning("Arbitration reply named no candidate: %r", reply[:80])
        return candidates[0]
    return candidates[choice - 1]


def _single() -> GenParams:
    return GenParams(temperature=0.0, top_p=1.0, n_samples=1)


# ---------------------------------------------------------------------------
# Environment actions


@dataclass(frozen=True, slots=True)
class EnvAction:
    """A command in the environment's grammar, e.g. ``click [12]``."""

    op: str
    element: Optional[int] = None
    text: Optional[str] = None

    def __str__(self) -> str:
        if self.op == "click":
            return f"click [{self.element}]"
        if self.op == "type":
            return f"type [{self.element}] [{self.text}]"
        if self.op in ("press", "scroll"):
            return f"{self.op} [{self.text}]"
        if self.op == "stop":
            return f"stop [{self.text or ''}]"
        return self.op


_ENV_PATTERNS: Tuple[Tuple[str, re.Pattern[str]], ...] = (
    ("click", re.compile(r"^click \[(\d+)\]$")),
    ("type", re.compile(r"^type \[(\d+)\] \[(.*)\]$", re.DOTALL)),
    ("press", re.compile(r"^press \[(.+)\]$")),
    ("scroll", re.compile(r"^scroll \[(down|up)\]$")),
    ("go_back", re.compile(r"^go_back$")),
    ("stop", re.compile(r"^stop(?: \[(.*)\])?$")),
)
_TREE_ID = re.compile(r"\[(\d+)\]")


def parse_env_action(text: str) -> EnvAction:
    line = text.strip().strip("`").strip()
    for op, pattern in _ENV_PATTERNS:
        match = pattern.match(line)
        if not match:
            continue
        if op == "click":
            return EnvAction(op, element=int(match.group(1)))
        if op == "type":
            return EnvAction(op, element=int(match.group(1)), text=match.group(2))
        if op in ("press", "scroll"):
            return EnvAction(op, text=match.group(1))
        if op == "stop":
            return EnvAction(op, text=match.group(1) or None)
        return EnvAction(op)
    raise EnvActionError(f"Not an environment command: {line[:80]!r}")


def extract_env_action(completion: str) -> EnvAction:
    """The first line of ``completion`` that parses as a command."""

    for line in completion.splitlines():
        try:
            return parse_env_action(line)
        except EnvActionError:
            continue
    raise EnvActionError(f"No environment command in reply: {completion[:80]!r}")


def tree_ids(accessibility_tree: str) -> frozenset:
    return frozenset(int(value) for value in _TREE_ID.findall(accessibility_tree))


def validate_env_action(action: EnvAction, accessibility_tree: str) -> None:
    if action.element is not None and action.element not in tree_ids(accessibility_tree):
        raise EnvActionError(f"Element [{action.element}] is not in the accessibility tree")


# ---------------------------------------------------------------------------
# Viewport


@dataclass(frozen=True, slots=True)
class Box:
    x: float
    y: float
    width: float
    height: float


@dataclass(frozen=True, slots=True)
class Viewport:
    top: float
    height: float

    def __post_init__(self) -> None:
        if self.height <= 0:
            raise ValueError(f"Viewport height must be positive, got {self.height!r}")

    @property
    def bottom(self) -> float:
        return self.top + self.height

    def scrolled(self, direction: str) -> "Viewport":
        step = self.height if direction == SCROLL_DOWN else -self.height
        return replace(self, top=self.top + step)


def viewport_guard(action: EnvAction, box: Box, vp: Viewport) -> List[EnvAction]:
    """Prefix ``action`` with the page scrolls that bring ``box`` into view.

    One scroll moves by one viewport height. A box taller than the viewport
    counts as visible once its top edge is on screen.
    """

    if box.height > vp.height:
        if vp.top <= box.y < vp.bottom:
            return [action]
        if box.y < vp.top:
            count = math.ceil((vp.top - box.y) / vp.height)
            return [EnvAction("scroll", text=SCROLL_UP)] * count + [action]
        count = math.floor((box.y - vp.top) / vp.height)
        return [EnvAction("scroll", text=SCROLL_DOWN)] * count + [action]

    if box.y >= vp.top and box.y + box.height <= vp.bottom:
        return [action]
    if box.y < vp.top:
        count = math.ceil((vp.top - box.y) / vp.height)
        return [EnvAction("scroll", text=SCROLL_UP)] * count + [action]
    count = math.ceil((box.y + box.height - vp.bottom) / vp.height)
    return [EnvAction("scroll", text=SCROLL_DOWN)] * count + [action]


# ---------------------------------------------------------------------------
# Environment adapters


@dataclass(frozen=True)
class Observation:
    url: str
    html: str
    accessibility_tree: str = ""
    viewport: Optional[Viewport] = None
    boxes: Mapping[int, Box] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Observation":
        viewport = data.get("viewport")
        return cls(
            url=str(data.get("url", "")),
            html=str(data.get("html", "")),
            accessibility_tree=str(data.get("accessibility_tree", "")),
            viewport=Viewport(**viewport) if viewport else None,
            boxes={int(key): Box(*value) for key, value in (data.get("boxes") or {}).items()},
        )


class EnvAdapter(Protocol):
    def observe(self) -> Observation: ...

    def execute(self, action: EnvAction) -> None: ...


class ReplayEnv:
    """Plays back a fixed sequence of pages.

    Every command except ``scroll`` and ``stop`` moves to the next page; the
    last page repeats. Scrolling shifts the current page's viewport.
    """

    def __init__(self, pages: Sequence[Observation]) -> None:
        if not pages:
            raise ValueError("ReplayEnv needs at least one page")
        self.pages = list(pages)
        self.position = 0
        self.executed: List[EnvAction] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike[str]) -> "ReplayEnv":
        pages = [
            Observation.from_dict(json.loads(line))
            for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        return cls(pages)

    def observe(self) -> Observation:
        return self.pages[self.position]

    def execute(self, action: EnvAction) -> None:
        self.executed.append(action)
        LOGGER.debug("Replay environment executing %s", action)
        if action.op == "scroll":
            page = self.pages[self.position]
            if page.viewport is not None:
                self.pages[self.position] = replace(
                    page, viewport=page.viewport.scrolled(action.text or SCROLL_DOWN)
                )
            return
        if action.op == "stop":
            return
        self.position = min(self.position + 1, len(self.pages) - 1)


# ---------------------------------------------------------------------------
# Pipeline


class Stage(str, Enum):
    REFINE = "refine"
    GENERATE = "generate"
    TRANSLATE = "translate"
    CHECK = "check"


_TRANSITIONS = {
    Stage.REFINE: frozenset({Stage.GENERATE}),
    Stage.GENERATE: frozenset({Stage.TRANSLATE}),
    Stage.TRANSLATE: frozenset({Stage.CHECK}),
    Stage.CHECK: frozenset({Stage.GENERATE}),
}


@dataclass
class PipelineState:
    objective: str
    refined_objective: str = ""
    stage: Stage = Stage.REFINE
    history: List[Action] = field(default_factory=list)
    env_actions: List[EnvAction] = field(default_factory=list)
    steps: int = 0
    done: bool = False
    answer: Optional[str] = None
    reason: Optional[str] = None

    def advance(self, stage: Stage) -> None:
        if stage not in _TRANSITIONS[self.stage]:
            raise RuntimeError(f"Cannot move from {self.stage.value} to {stage.value}")
        LOGGER.debug("Stage %s -> %s", self.stage.value, stage.value)
        self.stage = stage

    def finish(self, answer: Optional[str]) -> None:
        self.done = True
        self.answer = answer or None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "objective": self.objective,
            "refined_objective": self.refined_objective,
            "done": self.done,
            "answer": self.answer,
            "reason": self.reason,
            "steps": self.steps,
            "history": [format_action(action) for action in self.history],
            "env_actions": [str(action) for action in self.env_actions],
        }


@dataclass(frozen=True, slots=True)
class CheckVerdict:
    completed: bool
    answer: Optional[str] = None


_SUMMARY = re.compile(r"^\s*\**summary\**\s*:\s*(.*)$", re.IGNORECASE)


def parse_check_summary(text: str) -> CheckVerdict:
    """Read the last ``Summary:`` line; anything unreadable counts as incomplete."""

    lines = [match.group(1) for match in map(_SUMMARY.match, text.splitlines()) if match]
    if not lines:
        LOGGER.warning("Completeness reply has no Summary line")
        return CheckVerdict(completed=False)
    verdict, _, answer = lines[-1].strip().strip("*").partition(",")
    if verdict.strip().strip("[]\"'.").lower() != "completed":
        return CheckVerdict(completed=False)
    answer = answer.strip().strip("[]").strip()
    return CheckVerdict(completed=True, answer=answer or None)


@dataclass(frozen=True)
class Task:
    objective: str
    domain: str = "general"
    rules: str = ""
    example_objective: str = "Find the cheapest blue backpack"
    example_detailed: str = (
        'Type "blue backpack" into the search box and press Enter, sort the results '
        "by price from low to high, then open the first product in the list."
    )


@dataclass(frozen=True)
class PipelineClients:
    """``actor`` proposes HTML actions; ``planner`` handles every other stage."""

    actor: CompletionClient
    planner: CompletionClient


@dataclass(frozen=True)
class Limits:
    max_steps: int = 10
    params: GenParams = field(default_factory=GenParams)
    arbitrate: bool = False
    top_k: int = DEFAULT_TOP_K
    translate_attempts: int = 2
    prune_config: Optional[PruneConfig] = None
    tokenizer: Optional[TokenizerProfile] = None
    budget: Optional[int] = None
    pool_chunks: bool = True
    baseline_instructions: bool = False

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be positive, got {self.max_steps!r}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be positive, got {self.top_k!r}")
        if self.budget is not None and self.tokenizer is None:
            raise ValueError("A chunk budget needs a tokenizer")


class Transcript:
    """Every pipeline model call, kept in memory and optionally appended to JSONL."""

    def __init__(self, path: str | os.PathLike[str] | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.rows: List[Dict[str, Any]] = []

    def record(
        self,
        stage: str,
        prompt: PromptInput,
        completions: Sequence[str],
        action: Optional[str] = None,
    ) -> None:
        text = prompt if isinstance(prompt, str) else json.dumps(prompt, ensure_ascii=False)
        row: Dict[str, Any] = {
            "stage": stage,
            "prompt_hash": hashlib.sha256(text.encode("utf-8")).hexdigest(),
            "completion": completions[0] if completions else "",
            "action": action,
        }
        if len(completions) > 1:
            row["completions"] = list(completions)
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class PreparedPage:
    """A processed page and the chunks of it the actor is shown."""

    dom: PrunedDom
    chunks: Tuple[Chunk, ...]

    def html_for(self, node: int) -> str:
        """The shown chunk holding ``node``, or the last one."""

        try:
            return select_training_chunk(self.chunks, node).text
        except TargetNotFound:
            return self.chunks[-1].text


def prepare_observation(observation: Observation, limits: Limits) -> PreparedPage:
    dom = preprocess_html(observation.html, limits.prune_config, limits.tokenizer)
    serialized = serialize(dom)
    if limits.budget is None or limits.tokenizer is None:
        count = limits.tokenizer.count(serialized) if limits.tokenizer is not None else 0
        return PreparedPage(dom, (Chunk(0, serialized, count, frozenset(dom.id_index)),))
    chunks = chunk_dom(serialized, limits.tokenizer, limits.budget)
    if not limits.pool_chunks:
        chunks = [select_inference_chunk(chunks)]
    LOGGER.debug(
        "Observation split into %d chunks of at most %d tokens", len(chunks), limits.budget
    )
    return PreparedPage(dom, tuple(chunks))


def _actor_request(prompt: str, limits: Limits, pack: Optional[TemplatePack]) -> PromptInput:
    if not limits.baseline_instructions:
        return prompt
    return build_chat_messages(prompt, get_template("baseline", pack))


async def propose_action(
    client: CompletionClient,
    objective: str,
    observation: Observation,
    history: Sequence[Action],
    limits: Limits,
    *,
    prepared: Optional[PreparedPage] = None,
    planner: Optional[CompletionClient] = None,
    transcript: Optional[Transcript] = None,
    pack: Optional[TemplatePack] = None,
) -> Action:
    """One Generate stage: sample on every chunk, pool, vote and optionally arbitrate."""

    page = prepared or prepare_observation(observation, limits)
    if limits.params.seed is not None:
        LOGGER.info("Sampling %d actions with seed %d", limits.params.n_samples, limits.params.seed)
    pooled: List[str] = []
    calls: List[Tuple[PromptInput, List[str]]] = []
    for chunk in page.chunks:
        prompt = build_prompt(objective, observation.url, chunk.text, history)
        request = _actor_request(prompt, limits, pack)
        completions = await client.complete(request, limits.params, stage=Stage.GENERATE.value)
        calls.append((request, completions))
        pooled.extend(completions)
    try:
        actions = parse_samples(pooled, page.dom)
    except NoValidAction:
        if transcript is not None:
            for request, completions in calls:
                transcript.record(Stage.GENERATE.value, request, completions)
        raise
    groups = vote_groups(actions)
    chosen = groups[0][0]
    if transcript is not None:
        voted = format_action(replace(chosen, index=len(history) + 1))
        for position, (request, completions) in enumerate(calls, start=1):
            transcript.record(
                Stage.GENERATE.value,
                request,
                completions,
                voted if position == len(calls) else None,
            )
    if limits.arbitrate and planner is not None and len(groups) > 1:
        chosen = await arbitrate(
            planner,
            groups,
            objective=objective,
            url=observation.url,
            accessibility_tree=observation.accessibility_tree,
            history=history,
            top_k=limits.top_k,
            pack=pack,
            transcript=transcript,
        )
    return replace(chosen, index=len(history) + 1)


async def _refine(
    task: Task, planner: CompletionClient, transcript: Transcript, pack: Optional[TemplatePack]
) -> str:
    prompt = render_template(
        "refine",
        pack,
        domain=task.domain,
        rules=task.rules,
        example_objective=task.example_objective,
        example_detailed=task.example_detailed,
        objective=task.objective,
    )
    reply = (await planner.complete(prompt, _single(), stage=Stage.REFINE.value))[0]
    transcript.record(Stage.REFINE.value, prompt, [reply])
    refined = collapse_whitespace(reply)
    return refined or task.objective


async def _translate(
    task: Task,
    state: PipelineState,
    proposal: Action,
    observation: Observation,
    html: str,
    planner: CompletionClient,
    limits: Limits,
    transcript: Transcript,
    pack: Optional[TemplatePack],
) -> Optional[EnvAction]:
    prompt = render_template(
        "translate",
        pack,
        rules=task.rules,
        objective=state.refined_objective,
        url=observation.url,
        html=html,
        accessibility_tree=observation.accessibility_tree,
        history=format_history(state.history),
        proposal=format_action(proposal),
    )
    for attempt in range(1, limits.translate_attempts + 1):
        reply = (await planner.complete(prompt, _single(), stage=Stage.TRANSLATE.value))[0]
        try:
            action = extract_env_action(reply)
            validate_env_action(action, observation.accessibility_tree)
        except EnvActionError as exc:
            transcript.record(Stage.TRANSLATE.value, prompt, [reply])
            LOGGER.warning("Translation attempt %d rejected: %s", attempt, exc)
            continue
        transcript.record(Stage.TRANSLATE.value, prompt, [reply], str(action))
        return action
    return None


async def _check(
    task: Task,
    state: PipelineState,
    observation: Observation,
    planner: CompletionClient,
    transcript: Transcript,
    pack: Optional[TemplatePack],
) -> CheckVerdict:
    prompt = render_template(
        "check",
        pack,
        rules=task.rules,
        objective=state.objective,
        refined_objective=state.refined_objective,
        url=observation.url,
        accessibility_tree=observation.accessibility_tree,
        history=format_history(state.history),
    )
    reply = (await planner.complete(prompt, _single(), stage=Stage.CHECK.value))[0]
    verdict = parse_check_summary(reply)
    transcript.record(
        Stage.CHECK.value,
        prompt,
        [reply],
        "completed" if verdict.completed else "incomplete",
    )
    return verdict


def _execute(env: EnvAdapter, state: PipelineState, actions: Sequence[EnvAction]) -> None:
    for action in actions:
        env.execute(action)
        state.env_actions.append(action)


async def run_pipeline(
    task: Task,
    env: EnvAdapter,
    clients: PipelineClients,
    limits: Limits,
    *,
    transcript: Optional[Transcript] = None,
    pack: Optional[TemplatePack] = None,
) -> PipelineState:
    """Refine once, then Generate, Translate and Check until done or out of steps."""

    transcript = transcript or Transcript()
    state = PipelineState(objective=task.objective)
    state.refined_objective = await _refine(task, clients.planner, transcript, pack)
    LOGGER.info("Refined objective: %s", state.refined_objective)

    while state.steps < limits.max_steps:
        observation = env.observe()
        prepared = prepare_observation(observation, limits)
        state.advance(Stage.GENERATE)
        try:
            proposal = await propose_action(
                clients.actor,
                state.refined_objective,
                observation,
                state.history,
                limits,
                prepared=prepared,
                planner=clients.planner,
                transcript=transcript,
                pack=pack,
            )
        except NoValidAction as exc:
            state.reason = str(exc)
            LOGGER.warning("Stopping at step %d: %s", state.steps + 1, exc)
            return state
        state.steps += 1

        state.advance(Stage.TRANSLATE)
        command = await _translate(
            task,
            state,
            proposal,
            observation,
            prepared.html_for(proposal.node),
            clients.planner,
            limits,
            transcript,
            pack,
        )
        state.history.append(proposal)
        if command is None:
            LOGGER.warning("Step %d produced no valid command; nothing executed", state.steps)
        else:
            box = observation.boxes.get(command.element) if command.element is not None else None
            if box is not None and observation.viewport is not None:
                _execute(env, state, viewport_guard(command, box, observation.viewport))
            else:
                _execute(env, state, [command])
            LOGGER.info("Step %d: %s", state.steps, command)

        state.advance(Stage.CHECK)
        verdict = await _check(task, state, env.observe(), clients.planner, transcript, pack)
        if verdict.completed:
            state.finish(verdict.answer)
            _execute(env, state, [EnvAction("stop", text=state.answer)])
            LOGGER.info("Task completed after %d steps (answer: %s)", state.steps, state.answer)
            return state

    state.reason = f"step limit of {limits.max_steps} reached"
    LOGGER.info("Task incomplete: %s", state.reason)
    return state
