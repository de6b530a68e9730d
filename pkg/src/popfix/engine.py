"""Search orchestration: population initialization, the per-turn
group/sample/recombine/mutate/select loop, early termination, and the two
baseline search modes (single-shot prompting and greedy refinement).

Every run produces a RunReport that is sufficient to recompute all offline
metrics: the full candidate table, grouping and sampling decisions, operator
lineage, and every generator exchange.
"""

from __future__ import annotations

import dataclasses
import random
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

from . import operators
from .core import (
    CandidateIdAllocator,
    EngineConfig,
    EvaluatedCandidate,
    Lineage,
    Population,
    RepairTask,
    make_candidate,
    normalize_source,
)
from .errors import ContractError
from .evaluator import build_failure_report
from .grouping import (
    GroupSet,
    cluster,
    effective_group_count,
    rebalance_singletons,
    similarity_matrix,
)
from .operators import OperatorResult, PromptKind, PromptTemplates, select_mutation_parents
from .sampling import build_mixed_groups

REPORT_SCHEMA_VERSION = 1


class Termination(str, Enum):
    SOLVED = "solved"
    BUDGET_EXHAUSTED = "budget_exhausted"
    GENERATIONS_EXHAUSTED = "generations_exhausted"


@dataclass
class RunState:
    task: RepairTask
    config: EngineConfig
    population: Population
    generation: int
    total_generator_calls: int
    best_candidate: EvaluatedCandidate | None
    terminated: Termination | None = None
    solved_candidate: EvaluatedCandidate | None = None


@dataclass
class RunReport:
    """Full trace of one run; serializes to a single JSON document."""

    schema_version: int
    task_id: str
    method: str
    run_index: int
    seed: int
    suite_size: int
    config: dict
    terminated: str
    solved: bool
    best_candidate_id: str | None
    best_fitness: list[int]
    total_generator_calls: int
    init_attempts: int
    init_operations: list[dict]
    candidates: list[dict]
    generations: list[dict]
    exchanges: list[dict]
    wall_clock_s: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def strip_timing(report: dict) -> dict:
    """Copy of a report dict with latency/wall-clock fields removed, for
    comparing recorded and replayed runs."""
    out = dict(report)
    out.pop("wall_clock_s", None)
    out["exchanges"] = [
        {k: v for k, v in exchange.items() if k != "latency_s"} for exchange in out.get("exchanges", [])
    ]
    return out


def survivor_selection(
    pool: Sequence[EvaluatedCandidate], target_size: int, generation: int
) -> Population:
    """Duplicate removal followed by ranked top-N truncation.

    Ranking: pass rate desc, passed-test count desc, shorter source, lower id.
    Of several candidates with identical normalized source the best-ranked
    one survives.
    """
    if not pool:
        raise ContractError("survivor selection needs a non-empty pool")
    ranked = sorted(pool, key=lambda c: c.ranking_key())
    survivors: list[EvaluatedCandidate] = []
    seen: set[str] = set()
    for candidate in ranked:
        key = normalize_source(candidate.source)
        if key in seen:
            continue
        seen.add(key)
        survivors.append(candidate)
        if len(survivors) == target_size:
            break
    return Population(generation=generation, members=tuple(survivors), target_size=target_size)


def _config_to_jsonable(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _config_to_jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_config_to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _config_to_jsonable(v) for k, v in value.items()}
    return value


def _candidate_record(candidate: EvaluatedCandidate) -> dict:
    return {
        "id": candidate.candidate_id,
        "source": candidate.source,
        "signature": sorted(candidate.signature),
        "fitness": [candidate.fitness.numerator, candidate.fitness.denominator],
        "fitness_value": float(candidate.fitness),
        "per_test": [v.value for v in candidate.outcome.per_test],
        "lineage": candidate.lineage.value,
        "parents": list(candidate.parent_ids),
        "generation_born": candidate.generation_born,
    }


class EvolutionRun:
    """One repair run: owns the rng, candidate ids, and the report trace."""

    def __init__(
        self,
        task: RepairTask,
        config: EngineConfig,
        generator,
        evaluator,
        method: str = "evolve",
        run_index: int = 0,
    ):
        self.task = task
        self.config = config
        self.generator = generator
        self.evaluator = evaluator
        self.method = method
        self.run_index = run_index
        self.rng = random.Random(config.rng_seed)
        self.templates = PromptTemplates.load(config.template_dir)
        self._ids = CandidateIdAllocator()
        self._outcome_cache: dict[str, Any] = {}
        self.candidates: list[EvaluatedCandidate] = []
        self.by_id: dict[str, EvaluatedCandidate] = {}
        self.exchanges: list[dict] = []
        self.init_operations: list[dict] = []
        self.generation_records: list[dict] = []
        self.init_attempts = 0
        self.state = RunState(
            task=task,
            config=config,
            population=Population(generation=0, members=(), target_size=max(1, config.init_population)),
            generation=0,
            total_generator_calls=0,
            best_candidate=None,
        )
        # Population rejects empty-with-duplicates only; an empty members tuple
        # is the pre-initialization placeholder.

    # -- bookkeeping ------------------------------------------------------

    def _evaluate(self, source: str):
        key = normalize_source(source)
        cached = self._outcome_cache.get(key)
        if cached is None:
            cached = self.evaluator.evaluate(source, self.task.suite)
            self._outcome_cache[key] = cached
        return cached

    def _new_candidate(
        self, source: str, lineage: Lineage, parent_ids: tuple[str, ...], generation_born: int
    ) -> EvaluatedCandidate:
        outcome = self._evaluate(source)
        candidate = make_candidate(
            candidate_id=self._ids.next_id(),
            source=source,
            outcome=outcome,
            suite_size=self.task.suite.size,
            lineage=lineage,
            parent_ids=parent_ids,
            generation_born=generation_born,
        )
        self.candidates.append(candidate)
        self.by_id[candidate.candidate_id] = candidate
        best = self.state.best_candidate
        if best is None or candidate.ranking_key() < best.ranking_key():
            self.state.best_candidate = candidate
        return candidate

    def _absorb_exchanges(self, result: OperatorResult) -> list[str]:
        ids = []
        for exchange in result.exchanges:
            self.exchanges.append(exchange.to_dict())
            ids.append(exchange.request_id)
        self.state.total_generator_calls += len(result.exchanges)
        return ids

    def _operation_record(self, op_id: str, result: OperatorResult, child_id: str | None) -> dict:
        record = {
            "op_id": op_id,
            "kind": result.kind.value,
            "source_pool": list(result.source_pool),
            "request_ids": self._absorb_exchanges(result),
            "child": child_id,
            "failure": result.failure,
        }
        return record

    def _mark_solved(self, candidate: EvaluatedCandidate) -> None:
        self.state.terminated = Termination.SOLVED
        self.state.solved_candidate = candidate

    # -- phases -----------------------------------------------------------

    def initialize(self) -> Population:
        """Seed with the buggy program, then prompt for candidates until the
        target population is filled or the attempt budget runs out."""
        cfg = self.config
        seed = self._new_candidate(self.task.buggy_program, Lineage.SEED, (), 0)
        collected = [seed]
        if seed.is_full_pass:
            self._mark_solved(seed)
        valid_generated = 0
        while (
            self.state.terminated is None
            and valid_generated < cfg.init_population
            and self.init_attempts < cfg.effective_init_budget
        ):
            self.init_attempts += 1
            result = operators.generate_initial(self.task, self.generator, self.templates)
            child_id = None
            if result.succeeded:
                valid_generated += 1
                candidate = self._new_candidate(result.solution_source, Lineage.INIT, (), 0)
                collected.append(candidate)
                child_id = candidate.candidate_id
                if candidate.is_full_pass:
                    self._mark_solved(candidate)
            self.init_operations.append(
                self._operation_record(f"init-{self.init_attempts}", result, child_id)
            )
        population = survivor_selection(collected, cfg.init_population, generation=0)
        self.state.population = population
        return population

    def evolve_generation(self) -> RunState:
        """One evolutionary turn: group, sample, recombine, mutate, select."""
        if self.state.terminated is not None:
            raise ContractError("run already terminated")
        cfg = self.config
        g = self.state.generation
        population = self.state.population

        k = effective_group_count(population.size, cfg.behavior_groups)
        groups = cluster(population.members, k, generation=g)
        sim = similarity_matrix(population.members)
        groups = rebalance_singletons(groups, sim)
        plan = build_mixed_groups(groups, self.by_id, cfg, self.rng)

        pools: list[tuple[str, ...]] = [grp for grp in groups.groups if len(grp) >= 2]
        pools.extend(plan.mixed_groups)

        operation_records: list[dict] = []
        pending: list[tuple[str, OperatorResult, Lineage, tuple[str, ...]]] = []

        for number, pool_ids in enumerate(pools, start=1):
            pool = [self.by_id[cid] for cid in pool_ids]
            result = operators.recombine(
                self.task,
                pool,
                self.generator,
                self.templates,
                include_buggy=cfg.include_buggy_in_recombination,
            )
            pending.append((f"g{g}-x{number}", result, Lineage.CROSSOVER, tuple(sorted(pool_ids))))

        parents = select_mutation_parents(
            population, cfg.mutations_per_turn, cfg.selection_epsilon, self.rng
        )
        for number, parent in enumerate(parents, start=1):
            report = build_failure_report(
                parent.outcome, self.evaluator.config.max_failures_in_report
            )
            if not report:
                raise ContractError("full-pass parent leaked into mutation selection")
            result = operators.mutate(self.task, parent, report, self.generator, self.templates)
            pending.append((f"g{g}-m{number}", result, Lineage.MUTATION, (parent.candidate_id,)))

        # All generator calls for the turn are made before any child is
        # evaluated, matching the batch-then-select structure of the search.
        children: list[EvaluatedCandidate] = []
        for op_id, result, lineage, parent_ids in pending:
            child_id = None
            if result.succeeded:
                child = self._new_candidate(result.solution_source, lineage, parent_ids, g + 1)
                children.append(child)
                child_id = child.candidate_id
            operation_records.append(self._operation_record(op_id, result, child_id))

        merged = list(population.members) + children
        solved = [c for c in merged if c.is_full_pass]
        record = {
            "index": g,
            "population": [c.candidate_id for c in population.members],
            "effective_k": groups.effective_k,
            "groups": [list(grp) for grp in groups.groups],
            "mixed_plan": {
                "allocation": {str(i): n for i, n in sorted(plan.per_group_allocation.items())},
                "mixed_groups": [list(m) for m in plan.mixed_groups],
                "used_fallback": plan.used_fallback,
            },
            "operations": operation_records,
            "new_candidate_ids": [c.candidate_id for c in children],
            "best_fitness_after": float(self.state.best_candidate.fitness)
            if self.state.best_candidate
            else 0.0,
            "survivors": None,
        }

        if solved:
            self._mark_solved(min(solved, key=lambda c: c.ranking_key()))
        else:
            next_population = survivor_selection(merged, cfg.init_population, generation=g + 1)
            self.state.population = next_population
            record["survivors"] = [c.candidate_id for c in next_population.members]
        self.state.generation = g + 1
        self.generation_records.append(record)
        return self.state

    def execute(self) -> RunReport:
        started = time.monotonic()
        self.initialize()
        while self.state.terminated is None and self.state.generation < self.config.max_turns:
            self.evolve_generation()
        if self.state.terminated is None:
            self.state.terminated = Termination.GENERATIONS_EXHAUSTED
        return self._build_report(time.monotonic() - started)

    def _build_report(self, elapsed: float) -> RunReport:
        best = self.state.best_candidate
        return RunReport(
            schema_version=REPORT_SCHEMA_VERSION,
            task_id=self.task.task_id,
            method=self.method,
            run_index=self.run_index,
            seed=self.config.rng_seed,
            suite_size=self.task.suite.size,
            config={
                "engine": _config_to_jsonable(self.config),
                "evaluator": _config_to_jsonable(self.evaluator.config),
                "backend": _config_to_jsonable(self.generator.config),
            },
            terminated=(self.state.terminated or Termination.GENERATIONS_EXHAUSTED).value,
            solved=self.state.terminated is Termination.SOLVED,
            best_candidate_id=best.candidate_id if best else None,
            best_fitness=[best.fitness.numerator, best.fitness.denominator] if best else [0, 1],
            total_generator_calls=self.state.total_generator_calls,
            init_attempts=self.init_attempts,
            init_operations=self.init_operations,
            candidates=[_candidate_record(c) for c in self.candidates],
            generations=self.generation_records,
            exchanges=self.exchanges,
            wall_clock_s=elapsed,
        )


# -- public operations -------------------------------------------------------

def initialize_population(task, config, generator, evaluator) -> Population:
    return EvolutionRun(task, config, generator, evaluator).initialize()


def run(task, config, generator, evaluator, run_index: int = 0) -> RunReport:
    """Full evolutionary search for one task (Population-based mode)."""
    return EvolutionRun(task, config, generator, evaluator, method="evolve", run_index=run_index).execute()


def baseline_naive(task, config, generator, evaluator, run_index: int = 0) -> RunReport:
    """Single prompt, single candidate, no refinement."""
    engine = EvolutionRun(task, config, generator, evaluator, method="naive", run_index=run_index)
    started = time.monotonic()
    engine.init_attempts = 1
    result = operators.generate_initial(task, engine.generator, engine.templates)
    child_id = None
    if result.succeeded:
        candidate = engine._new_candidate(result.solution_source, Lineage.INIT, (), 0)
        child_id = candidate.candidate_id
        if candidate.is_full_pass:
            engine._mark_solved(candidate)
    engine.init_operations.append(engine._operation_record("init-1", result, child_id))
    if engine.state.terminated is None:
        engine.state.terminated = Termination.BUDGET_EXHAUSTED
    return engine._build_report(time.monotonic() - started)


def baseline_greedy(task, config, generator, evaluator, run_index: int = 0) -> RunReport:
    """Single-trajectory refinement: repeatedly mutate the current best
    candidate and keep the child only when the ranking key improves.

    The attempt budget equals the evolutionary mode's full prompting budget
    (init + turns x operator calls; 41 under the default configuration).
    """
    engine = EvolutionRun(task, config, generator, evaluator, method="greedy", run_index=run_index)
    started = time.monotonic()
    budget = config.refinement_attempt_budget
    current = engine._new_candidate(task.buggy_program, Lineage.SEED, (), 0)
    if current.is_full_pass:
        engine._mark_solved(current)

    attempt = 0
    while engine.state.terminated is None and attempt < budget:
        attempt += 1
        report = build_failure_report(current.outcome, evaluator.config.max_failures_in_report)
        result = operators.mutate(
            task, current, report, engine.generator, engine.templates, retry_on_parse_error=False
        )
        child_id = None
        if result.succeeded:
            child = engine._new_candidate(
                result.solution_source, Lineage.MUTATION, (current.candidate_id,), attempt
            )
            child_id = child.candidate_id
            if child.ranking_key() < current.ranking_key():
                current = child
            if child.is_full_pass:
                engine._mark_solved(child)
        engine.generation_records.append(
            {
                "index": attempt - 1,
                "population": [current.candidate_id],
                "operations": [engine._operation_record(f"a{attempt}", result, child_id)],
                "best_fitness_after": float(current.fitness),
                "survivors": [current.candidate_id],
            }
        )
    if engine.state.terminated is None:
        engine.state.terminated = Termination.BUDGET_EXHAUSTED
    return engine._build_report(time.monotonic() - started)
