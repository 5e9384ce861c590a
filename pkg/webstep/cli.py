"""Command line entry point: ``python -m webstep.cli <command> ...``."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Iterable, List, Optional, Sequence, TypeVar

from .actions import format_action, parse_history
from .agent import (
    Limits,
    Observation,
    PipelineClients,
    ReplayEnv,
    Task,
    Transcript,
    propose_action,
    run_pipeline,
)
from .chunking import GENERATION_RESERVE
from .config import ConfigError, EndpointConfig, load_config_file
from .dom import parse_html, serialize
from .evaluation import EvalMode, evaluate_files
from .llm import ChatClient, CompletionClient, GenParams, ScriptedChatClient
from .preprocess import preprocess_html
from .pruning import PruneConfig, default_config, load_whitelist, prune
from .reports import format_build_summary, render_ratio_table, render_report_table
from .tokenizer import analyze_pruning, load_wordlist, resolve_tokenizer
from .workflows import (
    BuildReport,
    Workflow,
    accept_all,
    process_workflow,
    read_workflows,
    write_examples,
)

LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
DEFAULT_THRESHOLDS = (1.5, 1.75, 2.0, 2.25, 2.5)
PLANNER_ENV_PREFIX = "WEBSTEP_PLANNER"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

T = TypeVar("T")
R = TypeVar("R")


class UsageError(ValueError):
    """Flags that parse individually but do not make sense together."""


# ---------------------------------------------------------------------------
# Helpers


def map_ordered(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """``[func(item) for item in items]``, run on up to ``jobs`` threads."""

    values = list(items)
    if jobs <= 1 or len(values) <= 1:
        return [func(item) for item in values]

    async def runner() -> List[R]:
        semaphore = asyncio.Semaphore(jobs)

        async def one(item: T) -> R:
            async with semaphore:
                return await asyncio.to_thread(func, item)

        return list(await asyncio.gather(*(one(item) for item in values)))

    return asyncio.run(runner())


def configure_logging(verbose: bool, log_file: Optional[str]) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
    )


def _prune_config(args: argparse.Namespace) -> PruneConfig:
    config = load_whitelist(args.whitelist) if args.whitelist else default_config()
    return config.with_ratio(threshold=args.threshold, min_len=args.min_len)


def _require_tokenizer_for_threshold(args: argparse.Namespace) -> None:
    if args.threshold is not None and not args.tokenizer:
        raise UsageError("--threshold needs --tokenizer")


def _write_json(path: Optional[str], payload: Any) -> None:
    text = json.dumps(payload, indent=2, ensure_ascii=False)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
        LOGGER.info("Wrote %s", path)
    else:
        print(text)


def _parse_thresholds(value: str) -> List[float]:
    try:
        thresholds = [float(part) for part in value.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"Invalid threshold list: {value!r}") from exc
    if not thresholds:
        raise argparse.ArgumentTypeError("At least one threshold is required")
    return thresholds


def _positive_int(value: str) -> int:
    try:
        parsed = int(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"Invalid integer value: {value!r}") from exc
    if parsed <= 0:
        raise argparse.ArgumentTypeError(f"Expected a positive integer, got {value!r}")
    return parsed


# ---------------------------------------------------------------------------
# Commands


def cmd_preprocess(args: argparse.Namespace) -> int:
    _require_tokenizer_for_threshold(args)
    tok = resolve_tokenizer(args.tokenizer) if args.tokenizer else None
    text = Path(args.input).read_text(encoding="utf-8")
    pd = preprocess_html(text, _prune_config(args), tok)
    output = serialize(pd)
    if args.out:
        Path(args.out).write_text(output, encoding="utf-8")
        LOGGER.info("Wrote %d elements to %s", len(pd), args.out)
    else:
        sys.stdout.write(output)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    tok = resolve_tokenizer(args.tokenizer)
    config = load_whitelist(args.whitelist) if args.whitelist else default_config()

    def load(path: str):
        return prune(parse_html(Path(path).read_text(encoding="utf-8")), config)

    corpus = map_ordered(load, args.inputs, args.jobs)
    reports = analyze_pruning(
        corpus,
        tok,
        args.thresholds,
        load_wordlist(args.wordlist),
        min_len=args.min_len if args.min_len is not None else config.ratio_min_len,
    )
    if args.out:
        _write_json(args.out, [report.to_dict() for report in reports])
    print(render_ratio_table(reports))
    return EXIT_OK


def cmd_dataset(args: argparse.Namespace) -> int:
    if not args.tokenizer:
        raise UsageError("dataset needs --tokenizer to size the chunks")
    tok = resolve_tokenizer(args.tokenizer)
    config = _prune_config(args)
    loaded = read_workflows(args.workflows)
    language = args.language

    def language_filter(w: Workflow) -> bool:
        return w.language is None or w.language == language

    def build(w: Workflow):
        return process_workflow(
            w,
            tok,
            args.budget,
            context_window=args.context_window,
            reserve=args.reserve,
            config=config,
            language_filter=language_filter if language else accept_all,
        )

    report = BuildReport(rejected_lines=loaded.rejects)
    report.outcomes.extend(map_ordered(build, loaded.workflows, args.jobs))
    written = write_examples(args.out, report.examples())
    report_path = args.report or f"{args.out}.report.json"
    _write_json(report_path, report.to_dict())
    LOGGER.info("Wrote %d training examples to %s", written, args.out)
    print(format_build_summary(report))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = evaluate_files(args.gold, args.predictions, EvalMode(args.mode), args.ranker)
    payload = run.report.to_dict()
    payload["unparsable_predictions"] = run.unparsable_predictions
    payload["missing_predictions"] = run.missing_predictions
    if args.out:
        _write_json(args.out, payload)
    if args.records:
        with Path(args.records).open("w", encoding="utf-8") as handle:
            for record in run.records:
                handle.write(json.dumps(record.to_dict()) + "\n")
    print(render_report_table(run.report))
    return EXIT_OK


def _gen_params(args: argparse.Namespace) -> GenParams:
    return GenParams(
        temperature=args.temperature,
        top_p=args.top_p,
        n_samples=args.samples,
        max_new_tokens=args.max_new_tokens,
        seed=args.seed,
    )


def _limits(args: argparse.Namespace, max_steps: int = 1) -> Limits:
    _require_tokenizer_for_threshold(args)
    tok = resolve_tokenizer(args.tokenizer) if args.tokenizer else None
    if args.budget is not None and tok is None:
        raise UsageError("--budget needs --tokenizer")
    return Limits(
        max_steps=max_steps,
        params=_gen_params(args),
        arbitrate=args.arbitrate,
        top_k=args.top_k,
        prune_config=_prune_config(args),
        tokenizer=tok,
        budget=args.budget,
        pool_chunks=not args.last_chunk_only,
        baseline_instructions=args.baseline_prompt,
    )


def _clients(args: argparse.Namespace) -> PipelineClients:
    if args.mock:
        scripted = ScriptedChatClient.from_file(args.mock)
        return PipelineClients(actor=scripted, planner=scripted)
    try:
        actor_config = EndpointConfig.from_env(args.env_prefix)
    except RuntimeError as exc:
        raise UsageError(f"{exc} (or pass --mock)") from exc
    actor: CompletionClient = ChatClient(actor_config)
    try:
        planner: CompletionClient = ChatClient(EndpointConfig.from_env(args.planner_env_prefix))
    except RuntimeError:
        LOGGER.info("No planner endpoint configured; using the actor endpoint for every stage")
        planner = actor
    return PipelineClients(actor=actor, planner=planner)


def cmd_agent_step(args: argparse.Namespace) -> int:
    limits = _limits(args)
    clients = _clients(args)
    observation = Observation(
        url=args.url,
        html=Path(args.html).read_text(encoding="utf-8"),
        accessibility_tree=(
            Path(args.accessibility_tree).read_text(encoding="utf-8")
            if args.accessibility_tree
            else ""
        ),
    )
    history = (
        parse_history(Path(args.history).read_text(encoding="utf-8")) if args.history else []
    )
    transcript = Transcript(args.transcript)
    action = asyncio.run(
        propose_action(
            clients.actor,
            args.objective,
            observation,
            history,
            limits,
            planner=clients.planner,
            transcript=transcript,
        )
    )
    sys.stdout.write(format_action(action))
    return EXIT_OK


def cmd_agent_run(args: argparse.Namespace) -> int:
    limits = _limits(args, max_steps=args.max_steps)
    clients = _clients(args)
    env = ReplayEnv.from_file(args.env)
    task = Task(objective=args.objective, domain=args.domain, rules=args.rules)
    state = asyncio.run(
        run_pipeline(task, env, clients, limits, transcript=Transcript(args.transcript))
    )
    _write_json(args.out, state.to_dict())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_prune_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--whitelist", help="Whitelist file (default: the bundled one)")
    parser.add_argument("--tokenizer", help="Tokenizer JSON path or built-in profile name")
    parser.add_argument(
        "--threshold", type=float, help="Prune attribute values below this char/token ratio"
    )
    parser.add_argument(
        "--min-len", type=int, help="Only values longer than this many characters are pruned"
    )


def _add_agent_flags(parser: argparse.ArgumentParser) -> None:
    _add_prune_flags(parser)
    parser.add_argument("--objective", required=True, help="Task objective")
    parser.add_argument("--mock", help="Replay completions from this transcript JSONL")
    parser.add_argument("--transcript", help="Append every model call to this JSONL file")
    parser.add_argument("--env-prefix", default="WEBSTEP", help="Actor endpoint env prefix")
    parser.add_argument(
        "--planner-env-prefix", default=PLANNER_ENV_PREFIX, help="Planner endpoint env prefix"
    )
    parser.add_argument("--samples", type=_positive_int, default=5, help="Samples per step")
    parser.add_argument("--temperature", type=float, default=0.6)
    parser.add_argument("--top-p", type=float, default=0.95)
    parser.add_argument("--max-new-tokens", type=_positive_int, default=512)
    parser.add_argument("--seed", type=int, help="Base sampling seed")
    parser.add_argument("--budget", type=_positive_int, help="Observation chunk budget in tokens")
    parser.add_argument(
        "--last-chunk-only",
        action="store_true",
        help="Sample on the last chunk only instead of pooling every chunk",
    )
    parser.add_argument(
        "--baseline-prompt",
        action="store_true",
        help="Lead actor requests with the general-purpose model instructions",
    )
    parser.add_argument(
        "--arbitrate", action="store_true", help="Let the planner pick among the top vote groups"
    )
    parser.add_argument("--top-k", type=_positive_int, default=3, help="Groups offered to the planner")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="webstep", description="Web agent observation, dataset and evaluation toolkit."
    )
    parser.add_argument("--config", help="TOML file with default flag values")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    parser.add_argument("--log-file", help="Also write the log to this file")
    commands = parser.add_subparsers(dest="command", required=True)

    preprocess = commands.add_parser("preprocess", help="Prune one HTML page and number its nodes")
    preprocess.add_argument("--in", dest="input", required=True, help="Input HTML file")
    preprocess.add_argument("--out", help="Output file (default: stdout)")
    _add_prune_flags(preprocess)
    preprocess.set_defaults(handler=cmd_preprocess)

    analyze = commands.add_parser("analyze", help="Measure ratio pruning over a page corpus")
    analyze.add_argument("--in", dest="inputs", nargs="+", required=True, help="HTML files")
    analyze.add_argument("--tokenizer", required=True, help="Tokenizer JSON or profile name")
    analyze.add_argument("--whitelist", help="Whitelist file (default: the bundled one)")
    analyze.add_argument(
        "--thresholds",
        type=_parse_thresholds,
        default=list(DEFAULT_THRESHOLDS),
        help="Comma-separated ratio thresholds",
    )
    analyze.add_argument("--min-len", type=int, help="Minimum value length considered")
    analyze.add_argument("--wordlist", help="Lowercase English words, one per line")
    analyze.add_argument("--out", help="Write the reports as JSON")
    analyze.add_argument("--jobs", type=_positive_int, default=1)
    analyze.set_defaults(handler=cmd_analyze)

    dataset = commands.add_parser("dataset", help="Build training examples from workflows")
    dataset.add_argument("--workflows", required=True, help="Workflow JSONL file")
    dataset.add_argument("--out", required=True, help="Training JSONL output")
    dataset.add_argument("--report", help="Build report JSON (default: <out>.report.json)")
    _add_prune_flags(dataset)
    sizing = dataset.add_mutually_exclusive_group(required=True)
    sizing.add_argument("--budget", type=_positive_int, help="Fixed chunk budget in tokens")
    sizing.add_argument(
        "--context-window", type=_positive_int, help="Model context window in tokens"
    )
    dataset.add_argument(
        "--reserve",
        type=int,
        default=GENERATION_RESERVE,
        help="Tokens kept free for generation with --context-window",
    )
    dataset.add_argument("--language", help="Keep only workflows recorded in this language")
    dataset.add_argument("--jobs", type=_positive_int, default=1)
    dataset.set_defaults(handler=cmd_dataset)

    evaluate = commands.add_parser("eval", help="Score predictions against gold steps")
    evaluate.add_argument("--gold", required=True, help="Gold JSONL")
    evaluate.add_argument("--predictions", required=True, help="Predictions JSONL")
    evaluate.add_argument(
        "--mode", choices=[mode.value for mode in EvalMode], default=EvalMode.STRICT.value
    )
    evaluate.add_argument("--ranker", help="Candidate ranking JSONL for multi-stage remapping")
    evaluate.add_argument("--out", help="Write the report as JSON")
    evaluate.add_argument("--records", help="Write per-step judgments as JSONL")
    evaluate.set_defaults(handler=cmd_eval)

    agent = commands.add_parser("agent", help="Drive a model endpoint")
    agent_commands = agent.add_subparsers(dest="agent_command", required=True)

    step = agent_commands.add_parser("step", help="Propose the next action for one page")
    _add_agent_flags(step)
    step.add_argument("--url", required=True, help="Current page URL")
    step.add_argument("--html", required=True, help="Current page HTML file")
    step.add_argument("--accessibility-tree", help="Accessibility tree text file")
    step.add_argument("--history", help="File with the five-line blocks taken so far")
    step.set_defaults(handler=cmd_agent_step)

    run = agent_commands.add_parser("run", help="Run the full pipeline on a replayed site")
    _add_agent_flags(run)
    run.add_argument("--env", required=True, help="JSONL of pages to replay")
    run.add_argument("--max-steps", type=_positive_int, default=10)
    run.add_argument("--domain", default="general", help="Website domain for refinement")
    run.add_argument("--rules", default="", help="Extra rules added to the stage prompts")
    run.add_argument("--out", help="Write the final state as JSON (default: stdout)")
    run.set_defaults(handler=cmd_agent_run)

    parser.set_defaults(
        leaves={
            "preprocess": preprocess,
            "analyze": analyze,
            "dataset": dataset,
            "eval": evaluate,
            "step": step,
            "run": run,
        }
    )
    return parser


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse ``argv``, filling unset flags from ``--config`` when given."""

    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    leaf_name = getattr(args, "agent_command", None) or args.command
    try:
        values = load_config_file(args.config, section=args.command)
    except ConfigError as exc:
        parser.error(str(exc))
    known = set(vars(args)) - {"leaves", "handler", "command", "agent_command", "config"}
    for key in sorted(set(values) - known):
        LOGGER.warning("Ignoring unknown config key %r", key)
    leaf: argparse.ArgumentParser = args.leaves[leaf_name]
    leaf.set_defaults(**{key: value for key, value in values.items() if key in known})
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_arguments(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    configure_logging(args.verbose, args.log_file)
    try:
        return args.handler(args)
    except UsageError as exc:
        LOGGER.error("%s", exc)
        return EXIT_USAGE
    except Exception:
        LOGGER.exception("Command %s failed", args.command)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
