"""Multi-run orchestration, summary statistics, and archive persistence.

An archive is JSON Lines: one header line identifying the configuration, then
one line per evaluation event.  Per-run bests, the accuracy/time summary and
the aspect table are all recomputable from the entry lines alone, so the file
is the single source of truth.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import statistics
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, IO, Sequence

from . import __version__
from .evaluation import DATASETS, Evaluator, EvaluatorFailure, TrainSpec
from .shapes import Aspect, ImageShape, classify_aspect, propagate_shapes
from .space import HyperparamVector
from .sso import (
    SOURCE_BASELINE,
    EvaluationLogEntry,
    RunResult,
    SsoConfig,
    run_sso,
)

__all__ = [
    "ARCHIVE_FORMAT",
    "ARCHIVE_VERSION",
    "LAYER_COLUMNS",
    "ArchiveError",
    "ArchiveWriter",
    "EmptyArchive",
    "RunArchive",
    "RunSummary",
    "Summary",
    "aspect_table",
    "build_header",
    "derive_run_summaries",
    "export_runs_csv",
    "export_summary_csv",
    "read_archive",
    "run_experiment",
    "summarize",
]

ARCHIVE_FORMAT = "swarmtune-archive"
ARCHIVE_VERSION = 1

LAYER_COLUMNS = ("input", "conv1", "pool1", "conv2", "pool2")


class ArchiveError(Exception):
    """The archive file is missing, truncated, or malformed."""


class EmptyArchive(ArchiveError):
    """No completed runs to aggregate."""


@dataclass(frozen=True)
class RunSummary:
    """Best-of-run row derived from the evaluation log."""

    run: int
    best_vector: HyperparamVector
    best_fitness: float
    baseline_fitness: float
    wins_generation: int | None
    generations: int
    run_time_s: float


@dataclass(frozen=True)
class Summary:
    """Accuracy and time statistics over per-run bests.

    ``acc_std`` is the population standard deviation; ``time_mean`` is the
    mean summed evaluation time per (run, generation) group and ``total_time``
    the sum over all evaluations, in seconds.
    """

    n_runs: int
    acc_max: float
    acc_min: float
    acc_mean: float
    acc_std: float
    time_mean: float
    total_time: float


@dataclass
class RunArchive:
    header: dict
    entries: list[EvaluationLogEntry]
    run_summaries: list[RunSummary]

    @property
    def config_digest(self) -> str:
        return self.header.get("config_digest", "")

    def input_shape(self) -> ImageShape:
        return ImageShape.parse(self.header["input"])


def _config_payload(cfg: SsoConfig, spec: TrainSpec, evaluator_label: str) -> dict:
    return {
        "c_g": cfg.c_g,
        "c_p": cfg.c_p,
        "c_w": cfg.c_w,
        "n_sol": cfg.n_sol,
        "n_gen": cfg.n_gen,
        "n_run": cfg.n_run,
        "early_stop": cfg.early_stop,
        "seed": cfg.seed,
        "update_order": cfg.update_order,
        "frozen_gbest": cfg.frozen_gbest,
        "dataset": spec.dataset,
        "epochs": spec.epochs,
        "optimizer": spec.optimizer_name,
        "activation": spec.activation_name,
        "classifier": spec.classifier_name,
        "loss": spec.loss_name,
        "lr": spec.learning_rate,
        "momentum": spec.momentum,
        "train_subset": spec.train_subset,
        "test_subset": spec.test_subset,
        "num_classes": spec.num_classes,
        "evaluator": evaluator_label,
    }


def build_header(cfg: SsoConfig, spec: TrainSpec, evaluator_label: str) -> dict:
    config = _config_payload(cfg, spec, evaluator_label)
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()[:16]
    return {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "tool_version": __version__,
        "config_digest": digest,
        "input": str(DATASETS[spec.dataset].shape),
        "config": config,
        "conventions": {"acc_std": "population", "time_unit": "seconds"},
    }


def _entry_to_dict(entry: EvaluationLogEntry) -> dict:
    return {
        "run": entry.run,
        "generation": entry.generation,
        "solution": entry.solution,
        "vector": entry.vector.to_text(),
        "fitness": entry.fitness,
        "source": entry.source,
        "branch_tags": entry.branch_tags,
        "eval_time": entry.eval_time,
        "timestamp": entry.timestamp,
        "cached": entry.cached,
    }


def _entry_from_dict(obj: dict) -> EvaluationLogEntry:
    return EvaluationLogEntry(
        run=obj["run"],
        generation=obj["generation"],
        solution=obj["solution"],
        vector=HyperparamVector.from_text(obj["vector"]),
        fitness=float(obj["fitness"]),
        source=obj["source"],
        branch_tags=obj["branch_tags"],
        eval_time=float(obj["eval_time"]),
        timestamp=obj["timestamp"],
        cached=bool(obj.get("cached", False)),
    )


class ArchiveWriter:
    """Streaming JSONL writer; appends are serialized and flushed per line."""

    def __init__(self, path: str | Path, header: dict):
        self._file: IO[str] = open(path, "w", encoding="utf-8")
        self._lock = threading.Lock()
        self._file.write(json.dumps(header, separators=(",", ":")) + "\n")
        self._file.flush()

    def append(self, entry: EvaluationLogEntry) -> None:
        line = json.dumps(_entry_to_dict(entry), separators=(",", ":"))
        with self._lock:
            self._file.write(line + "\n")
            self._file.flush()

    def close(self) -> None:
        with self._lock:
            if not self._file.closed:
                self._file.close()

    def __enter__(self) -> "ArchiveWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def derive_run_summaries(entries: Sequence[EvaluationLogEntry]) -> list[RunSummary]:
    """Recompute per-run bests from the entry log.

    The best fitness of a run is the maximum over its non-baseline entries;
    the best vector is the earliest one reaching it (ties keep the incumbent,
    matching the optimizer).  The win generation is the generation of the
    first entry strictly beating the run's baseline fitness.  Runs without a
    baseline or without any evaluated solution (aborted mid-run) are skipped.
    """
    by_run: dict[int, list[EvaluationLogEntry]] = {}
    for entry in entries:
        by_run.setdefault(entry.run, []).append(entry)
    summaries = []
    for run in sorted(by_run):
        run_entries = by_run[run]
        baseline = next((e for e in run_entries if e.source == SOURCE_BASELINE), None)
        if baseline is None:
            continue
        best: EvaluationLogEntry | None = None
        wins: int | None = None
        generations = 0
        for e in run_entries:
            if e.source == SOURCE_BASELINE:
                continue
            generations = max(generations, e.generation)
            if best is None or e.fitness > best.fitness:
                best = e
            if wins is None and e.fitness > baseline.fitness:
                wins = e.generation
        if best is None:
            continue
        summaries.append(
            RunSummary(
                run=run,
                best_vector=best.vector,
                best_fitness=best.fitness,
                baseline_fitness=baseline.fitness,
                wins_generation=wins,
                generations=generations,
                run_time_s=sum(e.eval_time for e in run_entries),
            )
        )
    return summaries


def summarize(archive: RunArchive) -> Summary:
    """Aggregate per-run bests into the accuracy/time summary row."""
    if not archive.run_summaries:
        raise EmptyArchive("archive has no completed runs")
    bests = [rs.best_fitness for rs in archive.run_summaries]
    groups: dict[tuple[int, int], float] = {}
    for e in archive.entries:
        key = (e.run, e.generation)
        groups[key] = groups.get(key, 0.0) + e.eval_time
    total = sum(groups.values())
    return Summary(
        n_runs=len(bests),
        acc_max=max(bests),
        acc_min=min(bests),
        acc_mean=statistics.fmean(bests),
        acc_std=statistics.pstdev(bests),
        time_mean=total / len(groups) if groups else 0.0,
        total_time=total,
    )


def aspect_table(archive: RunArchive, input: ImageShape | None = None) -> dict[str, dict[Aspect, int]]:
    """Count wider/taller/square feature maps of each run's best network.

    Columns are the input image and the four layer outputs; every column sums
    to the number of runs.
    """
    if not archive.run_summaries:
        raise EmptyArchive("archive has no completed runs")
    if input is None:
        input = archive.input_shape()
    counts: dict[str, dict[Aspect, int]] = {
        layer: {aspect: 0 for aspect in Aspect} for layer in LAYER_COLUMNS
    }
    for rs in archive.run_summaries:
        trace = propagate_shapes(rs.best_vector, input)
        for layer, shape in zip(LAYER_COLUMNS, trace.layers()):
            counts[layer][classify_aspect(shape)] += 1
    return counts


def read_archive(path: str | Path) -> RunArchive:
    """Parse an archive file back into memory, recomputing run summaries."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive: {exc}") from exc
    if not lines:
        raise ArchiveError("archive is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"malformed header line: {exc.msg}") from exc
    if not isinstance(header, dict) or header.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError("not a swarmtune archive (bad header)")
    if header.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {header.get('version')!r}")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            entries.append(_entry_from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ArchiveError(f"malformed entry at line {lineno}: {exc}") from exc
    return RunArchive(header, entries, derive_run_summaries(entries))


def run_experiment(
    cfg: SsoConfig,
    spec: TrainSpec,
    evaluator_factory: Callable[[int, int], Evaluator],
    *,
    evaluator_label: str = "custom",
    out_path: str | Path | None = None,
    parallel_runs: int = 1,
) -> RunArchive:
    """Execute ``cfg.n_run`` independent runs with seeds ``seed .. seed+n-1``.

    ``evaluator_factory(run_index, run_seed)`` must return a fresh evaluator
    per run (caches are per run).  When ``out_path`` is given, entries stream
    to disk as they happen, so a failing run leaves a usable partial archive
    behind; the failure is re-raised.
    """
    header = build_header(cfg, spec, evaluator_label)
    writer = ArchiveWriter(out_path, header) if out_path is not None else None
    lock = threading.Lock()
    all_entries: list[EvaluationLogEntry] = []

    def sink(entry: EvaluationLogEntry) -> None:
        with lock:
            all_entries.append(entry)
        if writer is not None:
            writer.append(entry)

    def one_run(run_index: int) -> RunResult:
        run_cfg = replace(cfg, seed=cfg.seed + run_index)
        evaluator = evaluator_factory(run_index, run_cfg.seed)
        try:
            return run_sso(
                run_cfg,
                evaluator,
                spec.input_shape,
                run_index=run_index,
                on_entry=sink,
            )
        finally:
            evaluator.close()

    results: list[RunResult] = []
    try:
        if parallel_runs <= 1:
            for r in range(cfg.n_run):
                results.append(one_run(r))
        else:
            with concurrent.futures.ThreadPoolExecutor(max_workers=parallel_runs) as pool:
                futures = [pool.submit(one_run, r) for r in range(cfg.n_run)]
                for fut in futures:
                    results.append(fut.result())
    except EvaluatorFailure:
        if writer is not None:
            writer.close()
        raise
    finally:
        if writer is not None:
            writer.close()

    summaries = [
        RunSummary(
            run=res.run_index,
            best_vector=res.best_vector,
            best_fitness=res.best_fitness,
            baseline_fitness=res.baseline_fitness,
            wins_generation=res.wins_generation,
            generations=res.generations,
            run_time_s=res.eval_seconds,
        )
        for res in results
    ]
    return RunArchive(header, all_entries, summaries)


def export_runs_csv(archive: RunArchive, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "best_vector", "best_fitness", "wins_generation", "run_time_s"])
        for rs in archive.run_summaries:
            writer.writerow(
                [
                    rs.run,
                    rs.best_vector.to_text(),
                    repr(rs.best_fitness),
                    "" if rs.wins_generation is None else rs.wins_generation,
                    repr(rs.run_time_s),
                ]
            )


def export_summary_csv(archive: RunArchive, path: str | Path) -> None:
    s = summarize(archive)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["Acc(max)", "Acc(min)", "Acc(mean)", "Acc(std)", "Time(mean)", "Total Time"])
        writer.writerow(
            [repr(s.acc_max), repr(s.acc_min), repr(s.acc_mean), repr(s.acc_std), repr(s.time_mean), repr(s.total_time)]
        )
