"""Prompt rendering, response parsing, and parent selection.

Rendering is a pure function of its inputs: the same task and pool always
produce byte-identical prompts, which is what makes record/replay runs and
cache lookups work.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Sequence

from .core import EvaluatedCandidate, FailureRecord, Population, RepairTask
from .errors import ContractError, GeneratorFailure, ParseError


class PromptKind(str, Enum):
    INIT = "init"
    RECOMBINATION = "recombination"
    MUTATION = "mutation"


_TEMPLATE_FILES = {
    PromptKind.INIT: "init.txt",
    PromptKind.RECOMBINATION: "recombination.txt",
    PromptKind.MUTATION: "mutation.txt",
}


@dataclass(frozen=True)
class PromptTemplates:
    init: str
    recombination: str
    mutation: str

    @classmethod
    def load(cls, template_dir: str | Path | None = None) -> "PromptTemplates":
        """Built-in templates, or overrides from a directory holding the
        same three file names (init.txt, recombination.txt, mutation.txt)."""
        texts = {}
        for kind, filename in _TEMPLATE_FILES.items():
            if template_dir is not None:
                texts[kind] = Path(template_dir, filename).read_text(encoding="utf-8")
            else:
                texts[kind] = (
                    resources.files("popfix.templates").joinpath(filename).read_text(encoding="utf-8")
                )
        return cls(
            init=texts[PromptKind.INIT],
            recombination=texts[PromptKind.RECOMBINATION],
            mutation=texts[PromptKind.MUTATION],
        )


@dataclass(frozen=True)
class PromptBundle:
    kind: PromptKind
    rendered_text: str
    source_pool: tuple[str, ...]
    token_estimate: int


def _estimate_tokens(text: str) -> int:
    return max(1, (len(text) + 3) // 4)


def _fill(template: str, **slots: str) -> str:
    # Plain replacement instead of str.format: candidate sources and problem
    # statements routinely contain braces.
    out = template
    for name, value in slots.items():
        out = out.replace("{" + name + "}", value)
    return out


def behavior_summary(candidate: EvaluatedCandidate, suite_size: int) -> str:
    failing = sorted(set(range(1, suite_size + 1)) - candidate.signature)
    return f"passes {len(candidate.signature)}/{suite_size} tests; fails: {failing}"


def render_failure_section(report: Sequence[FailureRecord]) -> str:
    blocks = []
    for record in report:
        lines = [f"Test {record.test_index} [{record.category.value}]"]
        lines.append(f"Input: {record.failing_input}")
        lines.append(f"Expected: {record.expected}")
        label = "Error" if record.category.value in ("runtime_error", "timeout") else "Actual"
        lines.append(f"{label}: {record.actual}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def render_recombination_prompt(
    task: RepairTask,
    pool: Sequence[EvaluatedCandidate],
    templates: PromptTemplates | None = None,
    include_buggy: bool = False,
) -> PromptBundle:
    """Prompt over a whole candidate pool, one numbered entry per candidate.

    Each entry carries the candidate source plus a one-line behavior summary
    (pass count and failing indices); `include_buggy` additionally exposes
    the original faulty program at the top of the pool section.
    """
    if len(pool) < 2:
        raise ContractError(f"recombination needs >= 2 candidates, got {len(pool)}")
    templates = templates or PromptTemplates.load()
    ordered = sorted(pool, key=lambda c: c.candidate_id)
    suite_size = task.suite.size

    sections = []
    if include_buggy:
        sections.append(f"Original faulty program:\n{task.buggy_program}")
    for number, candidate in enumerate(ordered, start=1):
        sections.append(
            f"Candidate {number}:\n{candidate.source}\n"
            f"Behavior: {behavior_summary(candidate, suite_size)}"
        )
    text = _fill(
        templates.recombination,
        question_content=task.problem_statement,
        candidate_pool="\n\n".join(sections),
    )
    return PromptBundle(
        kind=PromptKind.RECOMBINATION,
        rendered_text=text,
        source_pool=tuple(c.candidate_id for c in ordered),
        token_estimate=_estimate_tokens(text),
    )


def render_mutation_prompt(
    task: RepairTask,
    parent: EvaluatedCandidate,
    report: Sequence[FailureRecord],
    templates: PromptTemplates | None = None,
) -> PromptBundle:
    """Prompt to refine one failing candidate, guided by its failure report."""
    if parent.is_full_pass:
        raise ContractError("nothing to mutate: parent already passes the whole suite")
    if not report:
        raise ContractError("mutation prompt needs a non-empty failure report")
    templates = templates or PromptTemplates.load()
    text = _fill(
        templates.mutation,
        question_content=task.problem_statement,
        candidate=parent.source,
        error_message=render_failure_section(report),
    )
    return PromptBundle(
        kind=PromptKind.MUTATION,
        rendered_text=text,
        source_pool=(parent.candidate_id,),
        token_estimate=_estimate_tokens(text),
    )


def render_init_prompt(task: RepairTask, templates: PromptTemplates | None = None) -> PromptBundle:
    """Prompt to repair the original faulty program from scratch."""
    templates = templates or PromptTemplates.load()
    if task.initial_error_info:
        failure_section = f"\n### Failure Report\n{task.initial_error_info}\n"
    else:
        failure_section = ""
    text = _fill(
        templates.init,
        question_content=task.problem_statement,
        candidate=task.buggy_program,
        failure_section=failure_section,
    )
    return PromptBundle(
        kind=PromptKind.INIT,
        rendered_text=text,
        source_pool=(),
        token_estimate=_estimate_tokens(text),
    )


# --- response parsing -----------------------------------------------------

_SOLUTION_OPEN = "<solution>"
_SOLUTION_CLOSE = "</solution>"
_REFLECTION_RE = re.compile(r"<reflection>(.*?)</reflection>", re.DOTALL)
_FENCE_RE = re.compile(r"```[^\n`]*\n?(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class ParsedResponse:
    solution_source: str
    reflection: str | None
    raw: str


def parse_response(raw: str) -> ParsedResponse:
    """Extract the single fenced code block inside <solution>...</solution>.

    Anything after </solution> is ignored (models routinely append prose).
    A missing close tag is tolerated by reading to end-of-text; a missing
    block, empty block, or multiple blocks is a ParseError.
    """
    open_at = raw.find(_SOLUTION_OPEN)
    if open_at == -1:
        raise ParseError("response has no <solution> block", raw)
    span_start = open_at + len(_SOLUTION_OPEN)
    close_at = raw.find(_SOLUTION_CLOSE, span_start)
    span = raw[span_start:] if close_at == -1 else raw[span_start:close_at]

    fences = _FENCE_RE.findall(span)
    if not fences:
        raise ParseError("no fenced code block inside <solution>", raw)
    if len(fences) > 1:
        raise ParseError(f"{len(fences)} fenced code blocks inside <solution>, need exactly 1", raw)
    source = fences[0].strip("\n")
    if not source.strip():
        raise ParseError("fenced code block inside <solution> is empty", raw)

    reflection_match = _REFLECTION_RE.search(raw[:open_at])
    reflection = reflection_match.group(1).strip() if reflection_match else None
    return ParsedResponse(solution_source=source, reflection=reflection, raw=raw)


# --- parent selection -----------------------------------------------------

def select_mutation_parents(
    population: Population,
    count: int,
    selection_epsilon: float,
    rng: random.Random,
) -> list[EvaluatedCandidate]:
    """Fitness-proportional draws (with replacement) over non-perfect members.

    Each draw picks candidate i with probability (F_i + eps) / sum_j (F_j + eps)
    over the eligible set. Fully-passing members are excluded; an empty
    eligible set yields an empty list.
    """
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    if selection_epsilon <= 0:
        raise ContractError("selection_epsilon must be > 0")
    eligible = [m for m in population.members if not m.is_full_pass]
    if not eligible:
        return []
    weights = [float(m.fitness) + selection_epsilon for m in eligible]
    return rng.choices(eligible, weights=weights, k=count)


# --- operator compositions -------------------------------------------------

@dataclass
class OperatorResult:
    """What one generator-backed operation produced (or failed to)."""

    kind: PromptKind
    source_pool: tuple[str, ...]
    solution_source: str | None
    exchanges: list
    failure: str | None = None

    @property
    def succeeded(self) -> bool:
        return self.solution_source is not None


def _generate_and_parse(bundle: PromptBundle, generator, retry_on_parse_error: bool) -> OperatorResult:
    exchanges = []
    attempts = 2 if retry_on_parse_error else 1
    last_error = "no attempt made"
    for _ in range(attempts):
        try:
            exchange = generator.generate(bundle)
        except GeneratorFailure as exc:
            last_error = f"{type(exc).__name__}: {exc}"
            break
        exchanges.append(exchange)
        try:
            parsed = parse_response(exchange.response_text)
        except ParseError as exc:
            last_error = f"ParseError: {exc}"
            continue
        return OperatorResult(
            kind=bundle.kind,
            source_pool=bundle.source_pool,
            solution_source=parsed.solution_source,
            exchanges=exchanges,
        )
    return OperatorResult(
        kind=bundle.kind,
        source_pool=bundle.source_pool,
        solution_source=None,
        exchanges=exchanges,
        failure=last_error,
    )


def recombine(
    task: RepairTask,
    pool: Sequence[EvaluatedCandidate],
    generator,
    templates: PromptTemplates | None = None,
    include_buggy: bool = False,
    retry_on_parse_error: bool = True,
) -> OperatorResult:
    """One generator call synthesizing a single child from a whole pool."""
    bundle = render_recombination_prompt(task, pool, templates, include_buggy)
    return _generate_and_parse(bundle, generator, retry_on_parse_error)


def mutate(
    task: RepairTask,
    parent: EvaluatedCandidate,
    report: Sequence[FailureRecord],
    generator,
    templates: PromptTemplates | None = None,
    retry_on_parse_error: bool = True,
) -> OperatorResult:
    """One generator call refining a single parent from its failure report."""
    bundle = render_mutation_prompt(task, parent, report, templates)
    return _generate_and_parse(bundle, generator, retry_on_parse_error)


def generate_initial(
    task: RepairTask,
    generator,
    templates: PromptTemplates | None = None,
) -> OperatorResult:
    """One init-prompt call; the init loop handles its own retry budget."""
    bundle = render_init_prompt(task, templates)
    return _generate_and_parse(bundle, generator, retry_on_parse_error=False)
