"""Offline evaluation metrics computed from RunReports.

Covers pass@k over repeated runs, best-candidate average pass rate, union
test-case coverage, their gap, and the crossover combination rate. Everything
here is a pure batch computation over report files; no engine state is needed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError


@dataclass(frozen=True)
class CrossoverEvent:
    parent_signatures: tuple[frozenset[int], ...]
    child_signature: frozenset[int]


@dataclass(frozen=True)
class TaskRunRecord:
    """Everything one (task, run) contributes to the metrics."""

    task_id: str
    run_index: int
    suite_size: int
    solved: bool
    signatures: tuple[frozenset[int], ...]
    crossover_events: tuple[CrossoverEvent, ...] = ()

    def __post_init__(self) -> None:
        if not self.signatures:
            raise ContractError(f"run {self.task_id}/{self.run_index} has no candidates")
        for sig in self.signatures:
            if sig and (min(sig) < 1 or max(sig) > self.suite_size):
                raise ContractError("signature indices must lie in 1..suite_size")


def pass_at_k(successes: int, runs: int, k: int) -> float:
    """Unbiased estimator: 1 - C(runs-successes, k) / C(runs, k)."""
    if not 0 <= successes <= runs:
        raise ContractError(f"need 0 <= successes <= runs, got {successes}/{runs}")
    if not 1 <= k <= runs:
        raise ContractError(f"need 1 <= k <= runs, got k={k}, runs={runs}")
    return 1.0 - math.comb(runs - successes, k) / math.comb(runs, k)


def pass_at_k_fraction(successes: int, runs: int) -> float:
    """Plain success fraction, exposed as a sensitivity alternative."""
    if not 0 <= successes <= runs or runs < 1:
        raise ContractError(f"need 0 <= successes <= runs, got {successes}/{runs}")
    return successes / runs


def avg_pass_rate(records: Sequence[TaskRunRecord]) -> float:
    """Mean over runs of the best single candidate's pass rate."""
    if not records:
        raise ContractError("no records")
    total = sum(max(len(sig) for sig in r.signatures) / r.suite_size for r in records)
    return total / len(records)


def test_case_coverage(records: Sequence[TaskRunRecord]) -> float:
    """Mean over runs of the union coverage across all candidates."""
    if not records:
        raise ContractError("no records")
    total = sum(len(frozenset().union(*r.signatures)) / r.suite_size for r in records)
    return total / len(records)


def coverage_gap(records: Sequence[TaskRunRecord], per_task: bool = False) -> float:
    """TCC minus APR. Aggregate gap-of-means by default; per_task averages
    the per-run gaps instead (identical result here, kept as a toggle for
    clarity when comparing against per-task breakdowns)."""
    if per_task:
        gaps = [
            len(frozenset().union(*r.signatures)) / r.suite_size
            - max(len(sig) for sig in r.signatures) / r.suite_size
            for r in records
        ]
        return sum(gaps) / len(gaps)
    return test_case_coverage(records) - avg_pass_rate(records)


class CombinationOutcome(Enum):
    COMBINED = 1
    NOT_COMBINED = 0
    EXCLUDED = "excluded"


def combination_indicator(
    parents: Sequence[frozenset[int] | set[int]], child: frozenset[int] | set[int]
) -> CombinationOutcome:
    """Did the child keep a distinct passing test from every parent?

    Tests shared by two or more parents are discarded first; a parent left
    with no distinct contribution excludes the whole event from the metric.
    """
    if len(parents) < 2:
        raise ContractError(f"combination indicator needs >= 2 parents, got {len(parents)}")
    counts: dict[int, int] = defaultdict(int)
    for parent in parents:
        for index in parent:
            counts[index] += 1
    shared = {index for index, count in counts.items() if count >= 2}
    distinct = [frozenset(parent) - shared for parent in parents]
    if any(not d for d in distinct):
        return CombinationOutcome.EXCLUDED
    child_set = frozenset(child)
    combined = all(child_set & d for d in distinct)
    return CombinationOutcome.COMBINED if combined else CombinationOutcome.NOT_COMBINED


def combination_rate(outcomes: Iterable[CombinationOutcome]) -> float | None:
    """Fraction of non-excluded crossover events that combined; None when
    every event was excluded (reported as absent)."""
    counted = [o for o in outcomes if o is not CombinationOutcome.EXCLUDED]
    if not counted:
        return None
    return sum(1 for o in counted if o is CombinationOutcome.COMBINED) / len(counted)


# --- report ingestion -------------------------------------------------------

def record_from_report(report: dict) -> TaskRunRecord:
    """Project one RunReport dict onto the inputs the metrics need."""
    signatures = tuple(frozenset(c["signature"]) for c in report["candidates"])
    sig_by_id = {c["id"]: frozenset(c["signature"]) for c in report["candidates"]}
    events = []
    for generation in report.get("generations", []):
        for op in generation.get("operations", []):
            if op["kind"] != "recombination" or op["child"] is None:
                continue
            events.append(
                CrossoverEvent(
                    parent_signatures=tuple(sig_by_id[pid] for pid in op["source_pool"]),
                    child_signature=sig_by_id[op["child"]],
                )
            )
    return TaskRunRecord(
        task_id=report["task_id"],
        run_index=report["run_index"],
        suite_size=report["suite_size"],
        solved=report["solved"],
        signatures=signatures,
        crossover_events=tuple(events),
    )


def load_reports(directory: str | Path) -> list[dict]:
    paths = sorted(Path(directory).rglob("*.json"))
    reports = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(json.load(fh))
    return reports


@dataclass
class MetricsSummary:
    methods: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return self.methods


def summarize(
    reports: Sequence[dict],
    ks: Sequence[int] = (1, 3),
    estimator: str = "unbiased",
    per_task_gap: bool = False,
) -> MetricsSummary:
    """Aggregate a directory of reports into per-method metric rows."""
    by_method: dict[str, list[TaskRunRecord]] = defaultdict(list)
    for report in reports:
        if not report.get("candidates"):
            continue
        by_method[report["method"]].append(record_from_report(report))

    summary = MetricsSummary()
    for method, records in sorted(by_method.items()):
        runs_per_task: dict[str, int] = defaultdict(int)
        solved_per_task: dict[str, int] = defaultdict(int)
        for record in records:
            runs_per_task[record.task_id] += 1
            solved_per_task[record.task_id] += int(record.solved)
        run_counts = set(runs_per_task.values())
        uniform_runs = min(run_counts)

        pass_rows = {}
        for k in ks:
            if k > uniform_runs:
                continue
            values = []
            for task_id, total in runs_per_task.items():
                c, r = solved_per_task[task_id], total
                if estimator == "fraction":
                    values.append(pass_at_k_fraction(c, r))
                else:
                    values.append(pass_at_k(c, r, min(k, r)))
            pass_rows[f"pass@{k}"] = 100.0 * sum(values) / len(values)

        outcomes = [
            combination_indicator([set(s) for s in e.parent_signatures], e.child_signature)
            for record in records
            for e in record.crossover_events
        ]
        rate = combination_rate(outcomes)
        summary.methods[method] = {
            "tasks": len(runs_per_task),
            "runs": len(records),
            **pass_rows,
            "apr": 100.0 * avg_pass_rate(records),
            "tcc": 100.0 * test_case_coverage(records),
            "coverage_gap": 100.0 * coverage_gap(records, per_task=per_task_gap),
            "combination_rate": None if rate is None else 100.0 * rate,
            "crossover_events": len(outcomes),
        }
    return summary


def render_table(summary: MetricsSummary) -> str:
    """Aligned plain-text table over methods and metric columns."""
    columns = ["method"]
    for row in summary.methods.values():
        for key in row:
            if key not in columns:
                columns.append(key)
    lines = []
    rows = [[method, *(row.get(col) for col in columns[1:])] for method, row in summary.methods.items()]

    def fmt(value) -> str:
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.2f}"
        return str(value)

    table = [columns] + [[fmt(v) for v in row] for row in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(columns))]
    for line in table:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(line, widths)))
    return "\n".join(lines)


def traces_csv(reports: Sequence[dict]) -> str:
    """Per-iteration best-fitness traces, one row per (method, task, run, step)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["method", "task_id", "run_index", "iteration", "best_fitness"])
    for report in reports:
        best_init = 0.0
        for candidate in report["candidates"]:
            if candidate["generation_born"] == 0:
                best_init = max(best_init, candidate["fitness_value"])
        writer.writerow([report["method"], report["task_id"], report["run_index"], 0, f"{best_init:.6f}"])
        for step, generation in enumerate(report.get("generations", []), start=1):
            writer.writerow(
                [
                    report["method"],
                    report["task_id"],
                    report["run_index"],
                    step,
                    f"{generation['best_fitness_after']:.6f}",
                ]
            )
    return buffer.getvalue()
