"""Evaluation harness for integer-answer math benchmarks.

Answers are integers in [0, 999] and the model states its result inside the
last ``\\boxed{...}`` of its final text.  Grading is exact match.  Batch
metrics follow the usual k-sample protocol: ``avg_at_k`` averages per-sample
accuracy over problems, ``pass_at_k`` asks whether any of the k samples was
right, so avg_at_k <= pass_at_k always.  Tool-usage metrics additionally
summarize how often emitted tool calls fail and how accuracy splits between
tool-using and tool-free samples (pooled over problems that have both
kinds).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

if TYPE_CHECKING:  # circular at runtime: orchestrator uses extract_answer
    from .orchestrator import RolloutTrace

BOX_MARKER = "\\boxed{"

# Error-analysis buckets.  Retrieval failures surface to the model when it
# asks for documentation of something that does not exist, hence the bucket
# name; the remaining buckets mirror the response error kinds.
ERROR_ANALYSIS_CATEGORIES: tuple[str, ...] = (
    "execution_error",
    "nonexistent_package",
    "unknown_tool",
    "malformed_call",
    "timeout",
)

_KIND_TO_CATEGORY = {
    "execution_error": "execution_error",
    "retrieval_error": "nonexistent_package",
    "unknown_tool": "unknown_tool",
    "malformed_call": "malformed_call",
    "timeout": "timeout",
}


def extract_answer(text: str) -> int | None:
    """Integer inside the last complete ``\\boxed{...}`` expression.

    Braces are matched, not regexed, so nested TeX inside the box does not
    truncate the content; content that is not a plain integer (after
    stripping spaces, ``$``, commas, and leading zeros) yields None.
    """
    last_content: str | None = None
    pos = text.find(BOX_MARKER)
    while pos >= 0:
        depth = 1
        i = pos + len(BOX_MARKER)
        while i < len(text) and depth > 0:
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
            i += 1
        if depth == 0:
            last_content = text[pos + len(BOX_MARKER) : i - 1]
        pos = text.find(BOX_MARKER, pos + 1)
    if last_content is None:
        return None
    cleaned = last_content.strip().replace("$", "").replace(",", "").replace("\\,", "")
    cleaned = cleaned.strip()
    sign = 1
    if cleaned.startswith(("+", "-")):
        sign = -1 if cleaned[0] == "-" else 1
        cleaned = cleaned[1:]
    if not cleaned.isdigit():
        return None
    return sign * int(cleaned)  # int() handles leading zeros: "007" -> 7


def grade(extracted: int | None, gold: int) -> bool:
    """Exact match against the gold answer (which must be in [0, 999])."""
    if not 0 <= gold <= 999:
        raise ValueError(f"gold answer out of range [0, 999]: {gold}")
    return extracted == gold


@dataclass(frozen=True)
class EvalItem:
    problem_id: str
    problem: str
    gold_answer: int

    def __post_init__(self) -> None:
        if not 0 <= self.gold_answer <= 999:
            raise ValueError(f"gold answer out of range [0, 999]: {self.gold_answer}")


@dataclass(frozen=True)
class EvalRecord:
    """One graded sample."""

    problem_id: str
    sample_index: int
    extracted: int | None
    correct: bool
    used_tools: bool
    tool_calls_total: int
    tool_calls_erroneous: int

    def __post_init__(self) -> None:
        if self.tool_calls_erroneous > self.tool_calls_total:
            raise ValueError("erroneous tool calls exceed total")
        if self.used_tools != (self.tool_calls_total > 0):
            raise ValueError("used_tools must match tool_calls_total > 0")


@dataclass(frozen=True)
class ProblemBreakdown:
    problem_id: str
    correct_count: int
    any_correct: bool
    tool_calls_total: int
    tool_calls_erroneous: int


@dataclass(frozen=True)
class MetricsReport:
    k: int
    problem_count: int
    avg_at_k: float
    pass_at_k: float
    tool_call_correctness: float | None  # None when no sample made a call
    acc_with_tools: float | None  # pooled over problems with both kinds
    acc_without_tools: float | None
    per_problem: tuple[ProblemBreakdown, ...] = field(default=())
    notes: str = (
        "acc_with/without_tools pool samples across problems having at "
        "least one tool-using and one tool-free sample"
    )


def record_from_trace(trace: "RolloutTrace", item: EvalItem) -> EvalRecord:
    """Grade one rollout trace against its problem.

    The answer is re-extracted from final_text rather than trusted from the
    trace, so grading stays independent of orchestrator bookkeeping.
    """
    from .orchestrator import CallSegment, ResponseSegment

    total = sum(1 for seg in trace.segments if isinstance(seg, CallSegment))
    erroneous = sum(
        1 for seg in trace.segments if isinstance(seg, ResponseSegment) and seg.is_error
    )
    extracted = extract_answer(trace.final_text)
    return EvalRecord(
        problem_id=trace.problem_id,
        sample_index=trace.sample_index,
        extracted=extracted,
        correct=grade(extracted, item.gold_answer),
        used_tools=total > 0,
        tool_calls_total=total,
        tool_calls_erroneous=erroneous,
    )


def records_from_traces(
    traces: Iterable["RolloutTrace"], items: Sequence[EvalItem]
) -> list[EvalRecord]:
    by_id = {item.problem_id: item for item in items}
    records = []
    for trace in traces:
        if trace.problem_id not in by_id:
            raise ValueError(f"trace references unknown problem {trace.problem_id!r}")
        records.append(record_from_trace(trace, by_id[trace.problem_id]))
    return records


def compute_metrics(records: Sequence[EvalRecord], k: int) -> MetricsReport:
    """Aggregate graded samples; every problem must contribute exactly k.

    Sums use ``math.fsum`` so results do not depend on iteration order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    groups: dict[str, list[EvalRecord]] = {}
    for rec in records:
        groups.setdefault(rec.problem_id, []).append(rec)
    if not groups:
        raise ValueError("no records to aggregate")
    for pid, recs in groups.items():
        if len(recs) != k:
            raise ValueError(f"problem {pid!r} has {len(recs)} records, expected k={k}")

    per_problem: list[ProblemBreakdown] = []
    for pid, recs in groups.items():
        per_problem.append(
            ProblemBreakdown(
                problem_id=pid,
                correct_count=sum(r.correct for r in recs),
                any_correct=any(r.correct for r in recs),
                tool_calls_total=sum(r.tool_calls_total for r in recs),
                tool_calls_erroneous=sum(r.tool_calls_erroneous for r in recs),
            )
        )
    problem_count = len(per_problem)
    avg_at_k = math.fsum(p.correct_count / k for p in per_problem) / problem_count
    pass_at_k = sum(p.any_correct for p in per_problem) / problem_count

    calling_records = [r for r in records if r.tool_calls_total > 0]
    total_calls = sum(r.tool_calls_total for r in calling_records)
    erroneous_calls = sum(r.tool_calls_erroneous for r in calling_records)
    tool_call_correctness = None if total_calls == 0 else 1.0 - erroneous_calls / total_calls

    mixed = {
        pid
        for pid, recs in groups.items()
        if any(r.used_tools for r in recs) and any(not r.used_tools for r in recs)
    }
    with_pool = [r for r in records if r.problem_id in mixed and r.used_tools]
    without_pool = [r for r in records if r.problem_id in mixed and not r.used_tools]
    acc_with = (
        math.fsum(r.correct for r in with_pool) / len(with_pool) if with_pool else None
    )
    acc_without = (
        math.fsum(r.correct for r in without_pool) / len(without_pool)
        if without_pool
        else None
    )
    return MetricsReport(
        k=k,
        problem_count=problem_count,
        avg_at_k=avg_at_k,
        pass_at_k=pass_at_k,
        tool_call_correctness=tool_call_correctness,
        acc_with_tools=acc_with,
        acc_without_tools=acc_without,
        per_problem=tuple(per_problem),
    )


def analyze_tool_errors(traces: Iterable["RolloutTrace"]) -> dict[str, int]:
    """Count erroneous tool responses per analysis category (all five keys
    always present)."""
    from .orchestrator import ResponseSegment

    counts = {category: 0 for category in ERROR_ANALYSIS_CATEGORIES}
    for trace in traces:
        for seg in trace.segments:
            if isinstance(seg, ResponseSegment) and seg.is_error:
                category = _KIND_TO_CATEGORY.get(seg.error_kind or "", "execution_error")
                counts[category] += 1
    return counts


def _percent(value: float | None) -> str:
    return "n/a" if value is None else f"{value * 100:.2f}%"


def render_report(report: MetricsReport, dataset: str = "dataset") -> str:
    """Human-readable report; percentages to two decimals."""
    lines = [
        f"Results on {dataset} ({report.problem_count} problems, k={report.k})",
        f"  Average@{report.k}: {_percent(report.avg_at_k)}",
        f"  Pass@{report.k}:    {_percent(report.pass_at_k)}",
        f"  Tool-call correctness: {_percent(report.tool_call_correctness)}",
        f"  Accuracy with tools:    {_percent(report.acc_with_tools)}",
        f"  Accuracy without tools: {_percent(report.acc_without_tools)}",
        f"  ({report.notes})",
    ]
    return "\n".join(lines)


def render_error_analysis(counts: Mapping[str, int]) -> str:
    total = sum(counts.values())
    lines = [f"Erroneous tool calls: {total}"]
    for category in ERROR_ANALYSIS_CATEGORIES:
        n = counts.get(category, 0)
        share = f"{n / total * 100:.2f}%" if total else "0.00%"
        lines.append(f"  {category}: {n} ({share})")
    return "\n".join(lines)


def load_dataset(path: str) -> list[EvalItem]:
    """Load a JSONL dataset of ``{problem_id, problem, gold_answer}`` rows."""
    items: list[EvalItem] = []
    with open(path, encoding="utf-8") as handle:
        for i, line in enumerate(handle):
            if not line.strip():
                continue
            doc = json.loads(line)
            try:
                items.append(
                    EvalItem(
                        problem_id=str(doc["problem_id"]),
                        problem=doc["problem"],
                        gold_answer=int(doc["gold_answer"]),
                    )
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{i + 1}: missing field {exc}") from exc
    if not items:
        raise ValueError(f"{path}: dataset is empty")
    return items
