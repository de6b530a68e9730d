from __future__ import annotations

import sys
from fractions import Fraction
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from popfix.core import (
    EvaluatedCandidate,
    EvaluationOutcome,
    FailureRecord,
    RepairTask,
    TestCase,
    TestKind,
    TestSuite,
    Lineage,
    Verdict,
)
from popfix.evaluator import synthetic_source


def make_suite(size: int, kind: TestKind = TestKind.FUNCTIONAL, time_limit_ms: int = 1000) -> TestSuite:
    return TestSuite.from_cases(
        TestCase(index=i, input=[i], expected_output=i * 10, kind=kind, time_limit_ms=time_limit_ms)
        for i in range(1, size + 1)
    )


def make_outcome(verdicts: list[Verdict], suite: TestSuite | None = None) -> EvaluationOutcome:
    failures = []
    for i, v in enumerate(verdicts, start=1):
        if v is Verdict.PASS:
            continue
        failures.append(
            FailureRecord(
                test_index=i,
                failing_input=f"in-{i}",
                expected=f"exp-{i}",
                actual=f"act-{i}",
                category=v,
            )
        )
    return EvaluationOutcome(per_test=tuple(verdicts), failures=tuple(failures))


def outcome_from_signature(signature: set[int], size: int) -> EvaluationOutcome:
    verdicts = [Verdict.PASS if i in signature else Verdict.WRONG_OUTPUT for i in range(1, size + 1)]
    return make_outcome(verdicts)


def make_cand(
    candidate_id: str,
    signature: set[int],
    size: int,
    source: str | None = None,
    lineage: Lineage = Lineage.INIT,
    generation_born: int = 0,
) -> EvaluatedCandidate:
    if source is None:
        passes = ",".join(str(i) for i in sorted(signature)) if signature else ""
        source = synthetic_source(candidate_id, passes=passes)
    return EvaluatedCandidate(
        candidate_id=candidate_id,
        source=source,
        signature=frozenset(signature),
        fitness=Fraction(len(signature), size),
        outcome=outcome_from_signature(signature, size),
        lineage=lineage,
        generation_born=generation_born,
    )


def solution_response(source: str, reflection: str = "looks fixable") -> str:
    return f"<reflection>{reflection}</reflection>\n<solution>\n```python\n{source}\n```\n</solution>\n"


def make_task(
    task_id: str = "t1",
    size: int = 6,
    buggy_passes: str = "1,2,3",
    kind: TestKind = TestKind.FUNCTIONAL,
    error_info: str | None = None,
) -> RepairTask:
    return RepairTask(
        task_id=task_id,
        problem_statement=f"Problem statement for {task_id}.",
        buggy_program=synthetic_source("seed", passes=buggy_passes),
        suite=make_suite(size, kind=kind),
        initial_error_info=error_info,
    )


@pytest.fixture
def suite6() -> TestSuite:
    return make_suite(6)
