"""Domain types and the two pure evaluation formulas.

Everything here is immutable after construction and safe to share across
worker threads. Fitness is kept as an exact rational so ranking ties are
deterministic; a float projection exists for reporting only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import ContractError, DatasetError

FAILURE_TEXT_LIMIT = 2000
TRUNCATION_MARKER = " ...[truncated]"

DEFAULT_TIME_LIMIT_MS = 2000


class TestKind(str, Enum):
    STDIO = "stdio"
    FUNCTIONAL = "functional"


class Verdict(str, Enum):
    PASS = "pass"
    WRONG_OUTPUT = "wrong_output"
    RUNTIME_ERROR = "runtime_error"
    TIMEOUT = "timeout"


class Lineage(str, Enum):
    SEED = "seed"
    INIT = "init"
    CROSSOVER = "crossover"
    MUTATION = "mutation"


def truncate_text(text: str, limit: int = FAILURE_TEXT_LIMIT) -> str:
    """Cap prompt-bound text at `limit` characters with an explicit marker."""
    if len(text) <= limit:
        return text
    return text[:limit] + TRUNCATION_MARKER


@dataclass(frozen=True)
class TestCase:
    """One test: 1-based index, input payload, and expected output.

    For stdio tests input/expected are strings; for functional tests the
    input is a JSON-style argument list and expected is a JSON-style value.
    """

    index: int
    input: Any
    expected_output: Any
    kind: TestKind = TestKind.FUNCTIONAL
    time_limit_ms: int = DEFAULT_TIME_LIMIT_MS

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ContractError(f"test index must be >= 1, got {self.index}")
        if self.time_limit_ms <= 0:
            raise ContractError(f"time_limit_ms must be > 0, got {self.time_limit_ms}")


@dataclass(frozen=True)
class TestSuite:
    cases: tuple[TestCase, ...]

    def __post_init__(self) -> None:
        if not self.cases:
            raise ContractError("a test suite needs at least one case")
        indices = [c.index for c in self.cases]
        if indices != list(range(1, len(self.cases) + 1)):
            raise ContractError(f"test indices must be exactly 1..{len(self.cases)}, got {indices}")

    @property
    def size(self) -> int:
        return len(self.cases)

    @classmethod
    def from_cases(cls, cases: Iterable[TestCase]) -> "TestSuite":
        return cls(cases=tuple(cases))


@dataclass(frozen=True)
class RepairTask:
    """A faulty program, its problem statement, and the judging suite."""

    task_id: str
    problem_statement: str
    buggy_program: str
    suite: TestSuite
    initial_error_info: str | None = None

    def __post_init__(self) -> None:
        if not self.buggy_program.strip():
            raise ContractError(f"task {self.task_id!r}: buggy_program is empty")


@dataclass(frozen=True)
class FailureRecord:
    test_index: int
    failing_input: str
    expected: str
    actual: str
    category: Verdict

    def __post_init__(self) -> None:
        if self.category is Verdict.PASS:
            raise ContractError("a FailureRecord cannot describe a passing test")


@dataclass(frozen=True)
class EvaluationOutcome:
    """Per-test verdicts plus one FailureRecord per non-passing test.

    per_test is never truncated; failure text fields are capped at
    FAILURE_TEXT_LIMIT characters by the evaluator that builds them.
    """

    per_test: tuple[Verdict, ...]
    failures: tuple[FailureRecord, ...]

    def __post_init__(self) -> None:
        expected_fail = [i + 1 for i, v in enumerate(self.per_test) if v is not Verdict.PASS]
        got_fail = [f.test_index for f in self.failures]
        if got_fail != expected_fail:
            raise ContractError(
                f"failures must cover exactly the non-pass indices {expected_fail}, got {got_fail}"
            )


def compute_fitness(outcome: EvaluationOutcome, suite_size: int) -> Fraction:
    """Pass rate of an outcome as an exact rational in [0, 1]."""
    if len(outcome.per_test) != suite_size:
        raise ContractError(
            f"outcome covers {len(outcome.per_test)} tests, suite has {suite_size}"
        )
    passed = sum(1 for v in outcome.per_test if v is Verdict.PASS)
    return Fraction(passed, suite_size)


def compute_signature(outcome: EvaluationOutcome) -> frozenset[int]:
    """Set of 1-based test indices the candidate passes."""
    return frozenset(i + 1 for i, v in enumerate(outcome.per_test) if v is Verdict.PASS)


def normalize_source(source: str) -> str:
    """Canonical form used for duplicate detection.

    Line endings become LF, trailing whitespace is stripped per line, and
    leading/trailing blank lines are dropped. Comparison is byte-wise on
    the result; no language-aware equivalence is attempted.
    """
    lines = [line.rstrip() for line in source.replace("\r\n", "\n").replace("\r", "\n").split("\n")]
    while lines and not lines[0]:
        lines.pop(0)
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines)


@dataclass(frozen=True)
class EvaluatedCandidate:
    """A candidate program together with its measured behavior."""

    candidate_id: str
    source: str
    signature: frozenset[int]
    fitness: Fraction
    outcome: EvaluationOutcome
    lineage: Lineage
    parent_ids: tuple[str, ...] = ()
    generation_born: int = 0

    def __post_init__(self) -> None:
        if self.fitness * len(self.outcome.per_test) != len(self.signature):
            raise ContractError(
                f"candidate {self.candidate_id}: fitness {self.fitness} does not equal "
                f"|signature|/M = {len(self.signature)}/{len(self.outcome.per_test)}"
            )

    @property
    def fitness_value(self) -> float:
        return float(self.fitness)

    @property
    def is_full_pass(self) -> bool:
        return self.fitness == 1

    def ranking_key(self) -> tuple:
        """Sort key: pass rate desc, #passed desc, shorter source, then id."""
        return (-self.fitness, -len(self.signature), len(self.source), self.candidate_id)


def make_candidate(
    candidate_id: str,
    source: str,
    outcome: EvaluationOutcome,
    suite_size: int,
    lineage: Lineage,
    parent_ids: tuple[str, ...] = (),
    generation_born: int = 0,
) -> EvaluatedCandidate:
    """Derive signature and fitness from an outcome and wrap everything up."""
    return EvaluatedCandidate(
        candidate_id=candidate_id,
        source=source,
        signature=compute_signature(outcome),
        fitness=compute_fitness(outcome, suite_size),
        outcome=outcome,
        lineage=lineage,
        parent_ids=parent_ids,
        generation_born=generation_born,
    )


@dataclass(frozen=True)
class Population:
    generation: int
    members: tuple[EvaluatedCandidate, ...]
    target_size: int

    def __post_init__(self) -> None:
        if len(self.members) > self.target_size:
            raise ContractError(
                f"population holds {len(self.members)} members, target is {self.target_size}"
            )
        normalized = [normalize_source(m.source) for m in self.members]
        if len(set(normalized)) != len(normalized):
            raise ContractError("population contains duplicate normalized sources")

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class EngineConfig:
    """Search hyperparameters. Defaults follow the evaluated configuration."""

    max_turns: int = 5
    init_population: int = 6
    behavior_groups: int = 2
    crossing_groups: int = 2
    candidates_per_crossing_group: int = 3
    mutations_per_turn: int = 3
    entropy_epsilon: float = 1e-9
    selection_epsilon: float = 0.01
    rng_seed: int = 0
    init_attempt_budget: int | None = None
    include_buggy_in_recombination: bool = False
    template_dir: str | None = None

    def __post_init__(self) -> None:
        counts = {
            "max_turns": self.max_turns,
            "init_population": self.init_population,
            "behavior_groups": self.behavior_groups,
            "candidates_per_crossing_group": self.candidates_per_crossing_group,
            "mutations_per_turn": self.mutations_per_turn,
        }
        for name, value in counts.items():
            if value < 1:
                raise ContractError(f"{name} must be >= 1, got {value}")
        if self.crossing_groups < 0:
            raise ContractError(f"crossing_groups must be >= 0, got {self.crossing_groups}")
        if self.entropy_epsilon <= 0 or self.selection_epsilon <= 0:
            raise ContractError("entropy_epsilon and selection_epsilon must be > 0")
        if self.init_attempt_budget is not None and self.init_attempt_budget < 1:
            raise ContractError("init_attempt_budget must be >= 1 when set")

    @property
    def effective_init_budget(self) -> int:
        # Bounds cost when the backend emits unparsable output.
        return self.init_attempt_budget if self.init_attempt_budget is not None else 2 * self.init_population

    @property
    def refinement_attempt_budget(self) -> int:
        """Prompt budget of one full evolutionary run; reused by the greedy baseline."""
        per_turn = self.behavior_groups + self.crossing_groups + self.mutations_per_turn
        return self.init_population + self.max_turns * per_turn


class CandidateIdAllocator:
    """Hands out run-unique ids that sort in creation order."""

    def __init__(self) -> None:
        self._next = 0

    def next_id(self) -> str:
        self._next += 1
        return f"c{self._next:04d}"


# --- dataset file handling (JSON Lines, one task per line) ---------------

def task_from_dict(obj: dict, line_number: int | None = None) -> RepairTask:
    """Build a RepairTask from one parsed dataset record."""

    def fail(msg: str) -> DatasetError:
        return DatasetError(msg, line_number)

    if not isinstance(obj, dict):
        raise fail("task record must be a JSON object")
    for key in ("task_id", "problem_statement", "buggy_program", "tests"):
        if key not in obj:
            raise fail(f"missing required field {key!r}")
    if not isinstance(obj["tests"], list) or not obj["tests"]:
        raise fail("'tests' must be a non-empty array")

    cases = []
    for pos, t in enumerate(obj["tests"], start=1):
        if not isinstance(t, dict) or "input" not in t or "expected" not in t:
            raise fail(f"test #{pos} must be an object with 'input' and 'expected'")
        kind_raw = t.get("kind", TestKind.FUNCTIONAL.value)
        try:
            kind = TestKind(kind_raw)
        except ValueError:
            raise fail(f"test #{pos}: unknown kind {kind_raw!r}") from None
        limit = t.get("time_limit_ms", DEFAULT_TIME_LIMIT_MS)
        if not isinstance(limit, int) or limit <= 0:
            raise fail(f"test #{pos}: time_limit_ms must be a positive integer")
        cases.append(
            TestCase(index=pos, input=t["input"], expected_output=t["expected"], kind=kind, time_limit_ms=limit)
        )

    error_info = obj.get("initial_error_info")
    if error_info is not None and not isinstance(error_info, str):
        raise fail("'initial_error_info' must be a string when present")
    try:
        return RepairTask(
            task_id=str(obj["task_id"]),
            problem_statement=str(obj["problem_statement"]),
            buggy_program=str(obj["buggy_program"]),
            suite=TestSuite.from_cases(cases),
            initial_error_info=error_info,
        )
    except ContractError as exc:
        raise fail(str(exc)) from None


def task_to_dict(task: RepairTask) -> dict:
    obj: dict[str, Any] = {
        "task_id": task.task_id,
        "problem_statement": task.problem_statement,
        "buggy_program": task.buggy_program,
        "tests": [
            {
                "input": c.input,
                "expected": c.expected_output,
                "kind": c.kind.value,
                "time_limit_ms": c.time_limit_ms,
            }
            for c in task.suite.cases
        ],
    }
    if task.initial_error_info is not None:
        obj["initial_error_info"] = task.initial_error_info
    return obj


def load_tasks(path: str | Path) -> list[RepairTask]:
    """Read a JSON Lines dataset; raises DatasetError with the line number."""
    tasks = []
    seen_ids: set[str] = set()
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from None
    with fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc}", number) from None
            task = task_from_dict(obj, number)
            if task.task_id in seen_ids:
                raise DatasetError(f"duplicate task_id {task.task_id!r}", number)
            seen_ids.add(task.task_id)
            tasks.append(task)
    if not tasks:
        raise DatasetError(f"no tasks found in {path}")
    return tasks


def save_tasks(tasks: Iterable[RepairTask], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_dict(task), ensure_ascii=False) + "\n")
