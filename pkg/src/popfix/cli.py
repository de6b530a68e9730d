"""Command-line entry point: run experiments, compute metrics, validate
datasets, and inspect replay caches.

Exit codes: 0 success, 2 configuration/dataset problem, 3 environment
problem (backend or sandbox). Unsolved tasks are a result, not an error.
"""

from __future__ import annotations

import argparse
import dataclasses
import fnmatch
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import engine, metrics
from .core import EngineConfig, RepairTask, load_tasks
from .errors import (
    ContractError,
    DatasetError,
    EvaluationEnvironmentError,
    GeneratorFailure,
    CacheMissError,
    PopfixError,
)
from .evaluator import EvaluatorConfig, EvaluatorMode, make_evaluator
from .generator import BackendConfig, BackendKind, RecordingBackend, make_backend

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENVIRONMENT = 3

METHODS = ("evolve", "naive", "greedy")


@dataclass
class ExperimentConfig:
    dataset: str = ""
    output_dir: str = "runs"
    method: str = "evolve"
    runs_per_task: int = 5
    master_seed: int = 0
    jobs: int = 1
    task_filter: list[str] = field(default_factory=list)
    record_path: str | None = None
    engine: EngineConfig = field(default_factory=EngineConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    backend: BackendConfig = field(default_factory=lambda: BackendConfig(backend=BackendKind.SCRIPTED))

    def __post_init__(self) -> None:
        if self.runs_per_task < 1:
            raise ContractError("runs_per_task must be >= 1")
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}")


def _dataclass_from_dict(cls, obj: dict):
    if not isinstance(obj, dict):
        raise ContractError(f"expected an object for {cls.__name__}, got {type(obj).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ContractError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(obj)
    if cls is EvaluatorConfig and "mode" in kwargs:
        kwargs["mode"] = EvaluatorMode(kwargs["mode"])
    if cls is EvaluatorConfig and "interpreter_command" in kwargs:
        kwargs["interpreter_command"] = tuple(kwargs["interpreter_command"])
    if cls is BackendConfig and "backend" in kwargs:
        kwargs["backend"] = BackendKind(kwargs["backend"])
    return cls(**kwargs)


def load_experiment_config(path: str | None, overrides: argparse.Namespace) -> ExperimentConfig:
    """Config file first, then flags override individual fields."""
    raw: dict = {}
    if path:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    engine_cfg = _dataclass_from_dict(EngineConfig, raw.get("engine", {}))
    evaluator_cfg = _dataclass_from_dict(EvaluatorConfig, raw.get("evaluator", {}))
    backend_cfg = _dataclass_from_dict(BackendConfig, raw.get("backend", {}))
    cfg = ExperimentConfig(
        dataset=raw.get("dataset", ""),
        output_dir=raw.get("output_dir", "runs"),
        method=raw.get("method", "evolve"),
        runs_per_task=raw.get("runs_per_task", 5),
        master_seed=raw.get("master_seed", 0),
        jobs=raw.get("jobs", 1),
        task_filter=list(raw.get("task_filter", [])),
        record_path=raw.get("record_path"),
        engine=engine_cfg,
        evaluator=evaluator_cfg,
        backend=backend_cfg,
    )
    for name in ("dataset", "output_dir", "method", "record_path"):
        value = getattr(overrides, name.replace("-", "_"), None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(overrides, "runs", None) is not None:
        cfg.runs_per_task = overrides.runs
    if getattr(overrides, "seed", None) is not None:
        cfg.master_seed = overrides.seed
    if getattr(overrides, "jobs", None) is not None:
        cfg.jobs = overrides.jobs
    if getattr(overrides, "tasks", None):
        cfg.task_filter = [t.strip() for t in overrides.tasks.split(",") if t.strip()]
    cfg.__post_init__()
    return cfg


def derive_seed(master_seed: int, task_id: str, run_index: int) -> int:
    """Stable per-(task, run) seed so task subsets reproduce identical runs."""
    digest = hashlib.sha256(f"{master_seed}|{task_id}|{run_index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _select_tasks(tasks: list[RepairTask], patterns: list[str]) -> list[RepairTask]:
    if not patterns:
        return tasks
    selected = [
        t for t in tasks if any(fnmatch.fnmatch(t.task_id, pattern) for pattern in patterns)
    ]
    if not selected:
        raise DatasetError(f"no tasks match filter {patterns}")
    return selected


def write_report_atomically(report: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, ensure_ascii=False)
            fh.write("\n")
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _run_one(task: RepairTask, run_index: int, cfg: ExperimentConfig):
    seed = derive_seed(cfg.master_seed, task.task_id, run_index)
    engine_cfg = dataclasses.replace(cfg.engine, rng_seed=seed)
    backend_cfg = cfg.backend
    if (
        backend_cfg.backend is BackendKind.REPLAY
        and backend_cfg.cache_path
        and Path(backend_cfg.cache_path).is_dir()
    ):
        # A directory cache uses the same per-(task, run) layout --record writes.
        backend_cfg = dataclasses.replace(
            backend_cfg,
            cache_path=str(Path(backend_cfg.cache_path) / f"{task.task_id}.{run_index}.jsonl"),
        )
    backend = make_backend(backend_cfg)
    if cfg.record_path:
        record_file = Path(cfg.record_path) / f"{task.task_id}.{run_index}.jsonl"
        backend = RecordingBackend(backend, record_file)
    evaluator = make_evaluator(cfg.evaluator)
    if cfg.method == "naive":
        report = engine.baseline_naive(task, engine_cfg, backend, evaluator, run_index=run_index)
    elif cfg.method == "greedy":
        report = engine.baseline_greedy(task, engine_cfg, backend, evaluator, run_index=run_index)
    else:
        report = engine.run(task, engine_cfg, backend, evaluator, run_index=run_index)
    return report


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, args)
    if not cfg.dataset:
        print("error: no dataset given (flag --dataset or config field)", file=sys.stderr)
        return EXIT_CONFIG
    tasks = _select_tasks(load_tasks(cfg.dataset), cfg.task_filter)
    output = Path(cfg.output_dir)

    jobs = [(task, run_index) for task in tasks for run_index in range(cfg.runs_per_task)]

    def execute(job):
        task, run_index = job
        report = _run_one(task, run_index, cfg)
        path = output / task.task_id / f"{run_index}.json"
        write_report_atomically(report.to_dict(), path)
        return report

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            reports = list(pool.map(execute, jobs))
    else:
        reports = [execute(job) for job in jobs]

    solved_by_task: dict[str, int] = {}
    for report in reports:
        solved_by_task.setdefault(report.task_id, 0)
        solved_by_task[report.task_id] += int(report.solved)
    for task in tasks:
        solved = solved_by_task.get(task.task_id, 0)
        calls = sum(r.total_generator_calls for r in reports if r.task_id == task.task_id)
        print(f"{task.task_id}: solved {solved}/{cfg.runs_per_task} runs ({calls} generator calls)")
    print(f"wrote {len(reports)} reports to {output}")
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    reports = metrics.load_reports(args.reports_dir)
    if not reports:
        print(f"error: no report files under {args.reports_dir}", file=sys.stderr)
        return EXIT_CONFIG
    ks = [int(k) for k in args.k.split(",")] if args.k else [1, 3]
    summary = metrics.summarize(
        reports, ks=ks, estimator=args.estimator, per_task_gap=args.per_task_gap
    )
    out = json.dumps(summary.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(out + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    print(metrics.render_table(summary))
    if args.csv_traces:
        Path(args.csv_traces).write_text(metrics.traces_csv(reports), encoding="utf-8")
        print(f"wrote {args.csv_traces}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    tasks = load_tasks(args.dataset)
    print(f"{len(tasks)} tasks parsed from {args.dataset}")
    flagged = 0
    if args.execute:
        cfg_path = getattr(args, "config", None)
        cfg = load_experiment_config(cfg_path, argparse.Namespace())
        evaluator = make_evaluator(cfg.evaluator)
        for task in tasks:
            outcome = evaluator.evaluate(task.buggy_program, task.suite)
            passed = sum(1 for v in outcome.per_test if v.value == "pass")
            if passed == task.suite.size:
                print(f"  FLAG {task.task_id}: buggy program already passes the whole suite")
                flagged += 1
            elif passed == 0:
                print(f"  FLAG {task.task_id}: buggy program passes no test (not partially correct)")
                flagged += 1
            else:
                print(f"  ok   {task.task_id}: buggy program passes {passed}/{task.suite.size}")
    print("dataset looks valid" if flagged == 0 else f"{flagged} tasks flagged")
    return EXIT_OK


def cmd_replay_inspect(args: argparse.Namespace) -> int:
    path = Path(args.cache)
    if not path.exists():
        print(f"error: {path} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    print(f"{len(records)} recorded exchanges in {path}")
    total_cost = sum(r.get("estimated_cost", 0.0) for r in records)
    for record in records[: args.limit]:
        print(
            f"  {record['request_id']}  {record['kind']:<13}  "
            f"{record['prompt_tokens']:>6}+{record['completion_tokens']:<6} tok  "
            f"hash {record['prompt_sha256'][:12]}"
        )
    if len(records) > args.limit:
        print(f"  ... {len(records) - args.limit} more")
    print(f"total estimated cost: ${total_cost:.5f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popfix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a repair method over a dataset")
    p_run.add_argument("--config", help="experiment config JSON file")
    p_run.add_argument("--dataset", help="JSONL task file")
    p_run.add_argument("--output-dir", dest="output_dir", help="report output directory")
    p_run.add_argument("--method", choices=METHODS)
    p_run.add_argument("--runs", type=int, help="independent runs per task")
    p_run.add_argument("--seed", type=int, help="master seed")
    p_run.add_argument("--jobs", type=int, help="parallel (task, run) jobs")
    p_run.add_argument("--tasks", help="comma-separated task id globs")
    p_run.add_argument("--record", dest="record_path", help="directory for exchange recordings")
    p_run.set_defaults(func=cmd_run)

    p_metrics = sub.add_parser("metrics", help="aggregate metrics from a report directory")
    p_metrics.add_argument("reports_dir")
    p_metrics.add_argument("--out", help="write metrics JSON here")
    p_metrics.add_argument("--k", help="comma-separated k values (default 1,3)")
    p_metrics.add_argument("--estimator", choices=("unbiased", "fraction"), default="unbiased")
    p_metrics.add_argument("--per-task-gap", action="store_true")
    p_metrics.add_argument("--csv-traces", help="write per-iteration best-fitness CSV here")
    p_metrics.set_defaults(func=cmd_metrics)

    p_validate = sub.add_parser("validate", help="schema-check a dataset file")
    p_validate.add_argument("dataset")
    p_validate.add_argument("--execute", action="store_true", help="also run the buggy programs")
    p_validate.add_argument("--config", help="experiment config (for --execute evaluator settings)")
    p_validate.set_defaults(func=cmd_validate)

    p_inspect = sub.add_parser("replay-inspect", help="summarize a replay cache file")
    p_inspect.add_argument("cache")
    p_inspect.add_argument("--limit", type=int, default=20)
    p_inspect.set_defaults(func=cmd_replay_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ContractError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EvaluationEnvironmentError, GeneratorFailure, CacheMissError) as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except PopfixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
