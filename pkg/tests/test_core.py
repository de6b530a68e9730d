from __future__ import annotations

import json
import random
from fractions import Fraction

import pytest

from conftest import make_cand, make_outcome, make_suite, outcome_from_signature
from popfix.core import (
    CandidateIdAllocator,
    EngineConfig,
    EvaluatedCandidate,
    Population,
    TestCase,
    TestSuite,
    Verdict,
    compute_fitness,
    compute_signature,
    load_tasks,
    normalize_source,
    save_tasks,
    task_from_dict,
)
from popfix.errors import ContractError, DatasetError

P = Verdict.PASS
W = Verdict.WRONG_OUTPUT
R = Verdict.RUNTIME_ERROR


class TestComputeFitness:
    def test_half(self):
        assert compute_fitness(make_outcome([P, W, P, W]), 4) == Fraction(1, 2)

    def test_zero(self):
        assert compute_fitness(make_outcome([W, R, W]), 3) == Fraction(0)

    def test_full(self):
        assert compute_fitness(make_outcome([P] * 5), 5) == Fraction(1)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            compute_fitness(make_outcome([P, P]), 3)


class TestComputeSignature:
    def test_mixed(self):
        assert compute_signature(make_outcome([P, W, P])) == {1, 3}

    def test_all_fail(self):
        assert compute_signature(make_outcome([W, W, R])) == frozenset()

    def test_all_pass(self):
        assert compute_signature(make_outcome([P] * 6)) == set(range(1, 7))

    def test_rederiving_reproduces_stored_values(self):
        rng = random.Random(7)
        for _ in range(50):
            size = rng.randint(1, 8)
            sig = {i for i in range(1, size + 1) if rng.random() < 0.5}
            cand = make_cand("c0001", sig, size)
            assert compute_signature(cand.outcome) == cand.signature
            assert compute_fitness(cand.outcome, size) == cand.fitness
            assert cand.fitness * size == len(cand.signature)


class TestNormalizeSource:
    def test_strips_trailing_whitespace_and_blank_lines(self):
        raw = "\n\ndef f():   \n    return 1\t\n\n\n"
        assert normalize_source(raw) == "def f():\n    return 1"

    def test_normalizes_crlf(self):
        assert normalize_source("a\r\nb\r") == normalize_source("a\nb")

    def test_interior_blank_lines_preserved(self):
        assert normalize_source("a\n\nb") == "a\n\nb"


class TestCandidateInvariants:
    def test_fitness_must_match_signature(self):
        outcome = make_outcome([P, W])
        with pytest.raises(ContractError):
            EvaluatedCandidate(
                candidate_id="c0001",
                source="x",
                signature=frozenset({1}),
                fitness=Fraction(1),
                outcome=outcome,
                lineage="init",  # type: ignore[arg-type]
            )

    def test_full_pass_iff_whole_suite(self):
        full = make_cand("c0001", {1, 2, 3}, 3)
        partial = make_cand("c0002", {1, 2}, 3)
        assert full.is_full_pass and not partial.is_full_pass

    def test_id_allocator_monotone(self):
        alloc = CandidateIdAllocator()
        ids = [alloc.next_id() for _ in range(30)]
        assert ids == sorted(ids) and len(set(ids)) == 30


class TestPopulation:
    def test_rejects_duplicate_normalized_sources(self):
        a = make_cand("c0001", {1}, 2, source="def f():\n    return 1\n")
        b = make_cand("c0002", {1}, 2, source="def f():\n    return 1   \n\n")
        with pytest.raises(ContractError):
            Population(generation=0, members=(a, b), target_size=4)

    def test_rejects_oversize(self):
        members = tuple(make_cand(f"c{i:04d}", {1}, 2, source=f"# v{i}") for i in range(3))
        with pytest.raises(ContractError):
            Population(generation=0, members=members, target_size=2)


class TestSuiteValidation:
    def test_indices_must_be_contiguous(self):
        with pytest.raises(ContractError):
            TestSuite(cases=(TestCase(index=2, input="x", expected_output="y"),))

    def test_empty_suite_rejected(self):
        with pytest.raises(ContractError):
            TestSuite(cases=())

    def test_time_limit_positive(self):
        with pytest.raises(ContractError):
            TestCase(index=1, input="x", expected_output="y", time_limit_ms=0)


class TestEngineConfig:
    def test_defaults_give_41_attempt_budget(self):
        cfg = EngineConfig()
        assert cfg.refinement_attempt_budget == 41
        assert cfg.effective_init_budget == 12

    def test_counts_validated(self):
        with pytest.raises(ContractError):
            EngineConfig(init_population=0)
        with pytest.raises(ContractError):
            EngineConfig(crossing_groups=-1)
        EngineConfig(crossing_groups=0)  # zero mixed groups is allowed


class TestDatasetIO:
    def _record(self, task_id="demo"):
        return {
            "task_id": task_id,
            "problem_statement": "desc",
            "buggy_program": "print(1)",
            "tests": [
                {"input": "1", "expected": "2", "kind": "stdio", "time_limit_ms": 500},
                {"input": [[1, 2], 3], "expected": True, "kind": "functional"},
            ],
        }

    def test_roundtrip(self, tmp_path):
        task = task_from_dict(self._record())
        assert task.suite.size == 2
        assert task.suite.cases[0].index == 1
        path = tmp_path / "tasks.jsonl"
        save_tasks([task], path)
        loaded = load_tasks(path)
        assert len(loaded) == 1
        assert loaded[0] == task

    def test_malformed_json_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(self._record()) + "\n{not json\n", encoding="utf-8")
        with pytest.raises(DatasetError) as info:
            load_tasks(path)
        assert info.value.line_number == 2

    def test_missing_field_rejected(self):
        record = self._record()
        del record["buggy_program"]
        with pytest.raises(DatasetError):
            task_from_dict(record, 1)

    def test_duplicate_task_ids_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        line = json.dumps(self._record())
        path.write_text(line + "\n" + line + "\n", encoding="utf-8")
        with pytest.raises(DatasetError):
            load_tasks(path)
