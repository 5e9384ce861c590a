"""Plain-text tables for the reports printed by the command line."""
from __future__ import annotations

from typing import List, Optional, Sequence

from .evaluation import EvalReport
from .tokenizer import RatioReport
from .workflows import BuildReport

_METRIC_LABELS = (
    ("em", "EM"),
    ("cem", "Calibrated EM"),
    ("element_accuracy", "Element accuracy"),
    ("mean_action_f1", "Action F1"),
    ("step_sr", "Step SR"),
    ("task_sr", "Task SR"),
)


def _format_percent(value: Optional[float]) -> str:
    if value is None:
        return "n/a"
    return f"{value * 100:.2f}%"


def _format_integer(value: int) -> str:
    return f"{value:,}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """First column left-aligned, the others right-aligned, two-space gutters."""

    widths = [
        max(len(str(cell)) for cell in column) for column in zip(header, *rows)
    ]
    lines: List[str] = []
    for row in (header, *rows):
        cells = [
            cell.ljust(width) if position == 0 else cell.rjust(width)
            for position, (cell, width) in enumerate(zip(row, widths))
        ]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)


def render_report_table(report: EvalReport) -> str:
    rows = [
        [label, _format_percent(getattr(report, name))] for name, label in _METRIC_LABELS
    ]
    rows.append(["Steps", _format_integer(report.steps)])
    rows.append(["Solvable steps", _format_integer(report.solvable_steps)])
    rows.append(
        ["Tasks", f"{_format_integer(report.successful_tasks)}/{_format_integer(report.tasks)}"]
    )
    return _table(["Metric", "Value"], rows)


def render_ratio_table(reports: Sequence[RatioReport], top: int = 5) -> str:
    """One row per threshold, followed by the most pruned pairs of each."""

    rows = [
        [
            f"{report.threshold:g}",
            _format_integer(report.pruned_values),
            _format_percent(report.false_positive_rate),
            _format_integer(report.chars_before - report.chars_after),
            _format_integer(report.tokens_before - report.tokens_after),
            f"{report.mean_tokens_per_dom:,.1f}",
        ]
        for report in reports
    ]
    lines = [
        _table(
            ["Threshold", "Pruned", "False positives", "Chars saved", "Tokens saved", "Tokens/DOM"],
            rows,
        )
    ]
    for report in reports:
        pairs = report.top_pairs(top)
        if not pairs:
            continue
        listing = ", ".join(f"{tag}.{attr} ({count})" for (tag, attr), count in pairs)
        lines.append(f"{report.threshold:g}: {listing}")
    return "\n".join(lines)


def format_build_summary(report: BuildReport) -> str:
    lines = [
        f"Workflows: {_format_integer(len(report.outcomes))}",
        f"Accepted: {_format_integer(len(report.accepted))}",
        f"Examples: {_format_integer(report.example_count)}",
    ]
    if report.rejected_lines:
        lines.append(f"Rejected lines: {_format_integer(len(report.rejected_lines))}")
    for outcome in report.outcomes:
        for failure in outcome.failures:
            lines.append(
                f"  {outcome.workflow_id} step {failure.step_index}: {failure.reason}"
            )
    skipped = report.skipped()
    if skipped:
        lines.append(f"Skipped steps: {_format_integer(len(skipped))}")
    return "\n".join(lines)
