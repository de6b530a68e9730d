"""Candidate execution against a test suite.

Two substrates share one interface: a synthetic in-memory evaluator whose
verdicts are declared inside the candidate source (deterministic oracle for
engine tests and simulations), and an external evaluator that drives a
sandbox interpreter process over a line-delimited JSON stdio protocol.
"""

from __future__ import annotations

import json
import re
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

from .core import (
    EvaluationOutcome,
    FailureRecord,
    TestCase,
    TestKind,
    TestSuite,
    Verdict,
    truncate_text,
)
from .errors import ContractError, ShimLaunchError, ShimProtocolError


class EvaluatorMode(str, Enum):
    SYNTHETIC = "synthetic"
    EXTERNAL = "external"


@dataclass(frozen=True)
class EvaluatorConfig:
    mode: EvaluatorMode = EvaluatorMode.SYNTHETIC
    interpreter_command: tuple[str, ...] = ()
    per_test_timeout_ms: int = 2000
    max_parallel_evaluations: int = 1
    max_failures_in_report: int = 3
    entry_point: str = "solve"

    def __post_init__(self) -> None:
        if self.mode is EvaluatorMode.EXTERNAL and not self.interpreter_command:
            raise ContractError("external mode requires a non-empty interpreter_command")
        if self.max_parallel_evaluations < 1:
            raise ContractError("max_parallel_evaluations must be >= 1")
        if self.per_test_timeout_ms <= 0:
            raise ContractError("per_test_timeout_ms must be > 0")


def format_payload(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)


def compare_stdio(actual: str, expected: str) -> bool:
    """Competitive-judging comparison: per-line rstrip, trailing blanks dropped."""

    def canon(text: str) -> list[str]:
        lines = [line.rstrip() for line in text.splitlines()]
        while lines and not lines[-1]:
            lines.pop()
        return lines

    return canon(actual) == canon(expected)


def outcome_from_verdicts(
    verdicts: Sequence[Verdict],
    suite: TestSuite,
    actuals: dict[int, str] | None = None,
) -> EvaluationOutcome:
    """Assemble an outcome, generating one FailureRecord per non-pass test."""
    actuals = actuals or {}
    failures = []
    for case, verdict in zip(suite.cases, verdicts):
        if verdict is Verdict.PASS:
            continue
        failures.append(
            FailureRecord(
                test_index=case.index,
                failing_input=truncate_text(format_payload(case.input)),
                expected=truncate_text(format_payload(case.expected_output)),
                actual=truncate_text(actuals.get(case.index, f"<{verdict.value}>")),
                category=verdict,
            )
        )
    return EvaluationOutcome(per_test=tuple(verdicts), failures=tuple(failures))


def build_failure_report(outcome: EvaluationOutcome, limit: int) -> list[FailureRecord]:
    """First `limit` failures in suite order; empty iff the candidate is a full pass."""
    if limit < 1:
        raise ContractError(f"limit must be >= 1, got {limit}")
    return list(outcome.failures[:limit])


# --- synthetic substrate --------------------------------------------------

_MARKER_RE = re.compile(r"#\s*synthetic:\s*(.+)")

_ERROR_CATEGORIES = {
    "runtime_error": Verdict.RUNTIME_ERROR,
    "timeout": Verdict.TIMEOUT,
}


@dataclass(frozen=True)
class SyntheticProgramSpec:
    """Declared behavior of a synthetic candidate.

    Sources carry a marker line such as::

        # synthetic: pass=1,2,4 error=5:timeout

    `pass=all` passes the whole suite. Tests neither passed nor declared as
    errors come back as wrong_output. Sources without a marker pass nothing.
    """

    declared_pass_set: frozenset[int] = frozenset()
    declared_error_tests: tuple[tuple[int, Verdict], ...] = ()
    pass_all: bool = False

    @classmethod
    def parse(cls, source: str) -> "SyntheticProgramSpec":
        match = _MARKER_RE.search(source)
        if match is None:
            return cls()
        passes: set[int] = set()
        errors: list[tuple[int, Verdict]] = []
        pass_all = False
        for token in match.group(1).split():
            key, _, value = token.partition("=")
            if key == "pass":
                if value == "all":
                    pass_all = True
                elif value:
                    passes.update(int(i) for i in value.split(","))
            elif key == "error":
                for item in value.split(","):
                    if not item:
                        continue
                    idx, _, cat = item.partition(":")
                    errors.append((int(idx), _ERROR_CATEGORIES.get(cat, Verdict.RUNTIME_ERROR)))
        return cls(
            declared_pass_set=frozenset(passes),
            declared_error_tests=tuple(errors),
            pass_all=pass_all,
        )

    def verdict_for(self, index: int) -> Verdict:
        if self.pass_all or index in self.declared_pass_set:
            return Verdict.PASS
        for idx, category in self.declared_error_tests:
            if idx == index:
                return category
        return Verdict.WRONG_OUTPUT


def synthetic_source(name: str, passes: str = "", errors: str = "") -> str:
    """Helper used by tests and demos to fabricate a synthetic candidate."""
    parts = [f"# candidate {name}"]
    marker = "# synthetic:"
    if passes:
        marker += f" pass={passes}"
    if errors:
        marker += f" error={errors}"
    parts.append(marker)
    return "\n".join(parts) + "\n"


class SyntheticEvaluator:
    """Deterministic oracle: verdicts come straight from the source marker."""

    def __init__(self, config: EvaluatorConfig):
        self.config = config

    def evaluate(self, source: str, suite: TestSuite) -> EvaluationOutcome:
        spec = SyntheticProgramSpec.parse(source)
        verdicts = [spec.verdict_for(case.index) for case in suite.cases]
        actuals = {
            case.index: f"<synthetic {verdict.value}>"
            for case, verdict in zip(suite.cases, verdicts)
            if verdict is not Verdict.PASS
        }
        return outcome_from_verdicts(verdicts, suite, actuals)

    def evaluate_many(self, sources: Sequence[str], suite: TestSuite) -> list[EvaluationOutcome]:
        return evaluate_batch(self, sources, suite, self.config.max_parallel_evaluations)


# --- external substrate ---------------------------------------------------


class _ShimSession:
    """One sandbox process plus the line-JSON conversation with it."""

    def __init__(self, command: Sequence[str]):
        try:
            self.proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ShimLaunchError(f"cannot start sandbox command {list(command)!r}: {exc}") from exc

    def request(self, payload: dict, timeout_s: float) -> dict | None:
        """Send one request and wait for one reply line.

        Returns None when the process produced no reply within `timeout_s`
        (or died); the caller decides how to score that.
        """
        try:
            assert self.proc.stdin is not None
            self.proc.stdin.write(json.dumps(payload, ensure_ascii=False) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            return None

        result: dict[str, Any] = {}

        def reader() -> None:
            assert self.proc.stdout is not None
            result["line"] = self.proc.stdout.readline()

        thread = threading.Thread(target=reader, daemon=True)
        thread.start()
        thread.join(timeout_s)
        if thread.is_alive() or not result.get("line"):
            return None
        try:
            reply = json.loads(result["line"])
        except json.JSONDecodeError as exc:
            raise ShimProtocolError(f"unparseable sandbox reply {result['line']!r}: {exc}") from None
        if not isinstance(reply, dict) or "ok" not in reply:
            raise ShimProtocolError(f"sandbox reply missing 'ok' field: {reply!r}")
        return reply

    def close(self) -> None:
        try:
            if self.proc.poll() is None and self.proc.stdin is not None:
                self.proc.stdin.write(json.dumps({"cmd": "exit"}) + "\n")
                self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            pass
        self.kill()

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass

    @property
    def alive(self) -> bool:
        return self.proc.poll() is None


class ExternalEvaluator:
    """Runs candidates in sandbox processes, one process per candidate.

    A timeout verdict ends the current process (the shim exits by contract,
    or we hard-kill at 2x the limit); the evaluator respawns and resumes at
    the next test so one pathological test cannot sink the whole suite.
    """

    def __init__(self, config: EvaluatorConfig):
        if config.mode is not EvaluatorMode.EXTERNAL:
            raise ContractError("ExternalEvaluator requires external mode config")
        self.config = config

    def evaluate(self, source: str, suite: TestSuite) -> EvaluationOutcome:
        verdicts: list[Verdict] = []
        actuals: dict[int, str] = {}
        session: _ShimSession | None = None
        load_failed_message: str | None = None

        def ensure_loaded() -> bool:
            """(Re)spawn + load. Returns False when the candidate cannot load."""
            nonlocal session, load_failed_message
            if load_failed_message is not None:
                return False
            if session is not None and session.alive:
                return True
            session = _ShimSession(self.config.interpreter_command)
            load_timeout = 2 * self.config.per_test_timeout_ms / 1000.0
            reply = session.request({"cmd": "load", "source": source}, load_timeout)
            if reply is None:
                session.kill()
                load_failed_message = "candidate load timed out"
                return False
            if not reply.get("ok"):
                load_failed_message = str(reply.get("message", "load failed"))
                return False
            return True

        try:
            for case in suite.cases:
                if not ensure_loaded():
                    verdicts.append(Verdict.RUNTIME_ERROR)
                    actuals[case.index] = load_failed_message or "load failed"
                    continue
                assert session is not None
                verdict, actual = self._run_case(session, case)
                verdicts.append(verdict)
                if verdict is not Verdict.PASS:
                    actuals[case.index] = actual
                if verdict is Verdict.TIMEOUT:
                    # The shim exits after a timeout (by contract) or we hard
                    # killed it; drop the session so the next test respawns.
                    session.kill()
                    session = None
        finally:
            if session is not None:
                session.close()
        return outcome_from_verdicts(verdicts, suite, actuals)

    def _run_case(self, session: _ShimSession, case: TestCase) -> tuple[Verdict, str]:
        limit_ms = case.time_limit_ms or self.config.per_test_timeout_ms
        request = {
            "cmd": "run",
            "kind": case.kind.value,
            "input": case.input,
            "entry": self.config.entry_point,
            "timeout_ms": limit_ms,
        }
        # 2x limit is the hard supervision bound; the shim's own watchdog
        # normally answers first.
        reply = session.request(request, 2 * limit_ms / 1000.0)
        if reply is None:
            session.kill()
            return Verdict.TIMEOUT, f"no verdict within {2 * limit_ms} ms (hard kill)"
        if reply.get("ok"):
            if case.kind is TestKind.STDIO:
                stdout = str(reply.get("stdout", ""))
                if compare_stdio(stdout, str(case.expected_output)):
                    return Verdict.PASS, ""
                return Verdict.WRONG_OUTPUT, stdout
            result = reply.get("result")
            if _json_equal(result, case.expected_output):
                return Verdict.PASS, ""
            return Verdict.WRONG_OUTPUT, format_payload(result)
        error_type = reply.get("error_type")
        message = str(reply.get("message", ""))
        if error_type == "timeout":
            return Verdict.TIMEOUT, message or "timed out"
        if error_type == "exception":
            return Verdict.RUNTIME_ERROR, message or "exception"
        if error_type == "load_error":
            return Verdict.RUNTIME_ERROR, message or "load error"
        raise ShimProtocolError(f"unknown sandbox error_type {error_type!r}")

    def evaluate_many(self, sources: Sequence[str], suite: TestSuite) -> list[EvaluationOutcome]:
        return evaluate_batch(self, sources, suite, self.config.max_parallel_evaluations)


def _json_equal(actual: Any, expected: Any) -> bool:
    # Normalize through JSON so tuple/list and int/float artifacts compare sanely.
    return json.loads(json.dumps(actual)) == json.loads(json.dumps(expected))


def evaluate_batch(evaluator, sources: Sequence[str], suite: TestSuite, max_parallel: int) -> list[EvaluationOutcome]:
    """Evaluate candidates concurrently, preserving input order in the result."""
    if not sources:
        return []
    if max_parallel == 1 or len(sources) == 1:
        return [evaluator.evaluate(src, suite) for src in sources]
    with ThreadPoolExecutor(max_workers=max_parallel) as pool:
        return list(pool.map(lambda src: evaluator.evaluate(src, suite), sources))


def make_evaluator(config: EvaluatorConfig):
    if config.mode is EvaluatorMode.SYNTHETIC:
        return SyntheticEvaluator(config)
    return ExternalEvaluator(config)
