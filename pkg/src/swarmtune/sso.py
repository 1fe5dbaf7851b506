"""The swarm optimization loop over the 16-variable encoding.

Each generation every solution is rewritten variable by variable, left to
right: one uniform draw decides whether the variable copies the global best,
the solution's personal best, keeps its current value, or is redrawn uniformly
from its feasible bound.  Bounds are re-derived from the already-updated
prefix, so updated solutions are always feasible.  "Better" means strictly
greater fitness everywhere; ties keep the incumbent.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable

from .evaluation import Evaluator, EvaluatorFailure, FitnessRecord
from .shapes import ImageShape
from .space import NUM_VARIABLES, HyperparamVector, SearchSpace, baseline_vector

__all__ = [
    "BRANCH_TAGS",
    "PRESETS",
    "SOURCE_BASELINE",
    "SOURCE_INIT",
    "SOURCE_UPDATE",
    "EvaluationLogEntry",
    "RunResult",
    "SsoConfig",
    "SwarmState",
    "UnknownPreset",
    "preset",
    "run_sso",
    "update_solution",
    "update_variable",
]

# Cumulative thresholds (C_g, C_p, C_w) of the three studied settings.
PRESETS = {
    "SSO1": (0.4, 0.7, 0.9),
    "SSO2": (0.5, 0.5, 0.8),
    "SSO3": (0.5, 0.7, 0.7),
}

BRANCH_TAGS = ("G", "P", "X", "R")

SOURCE_BASELINE = "BASELINE"
SOURCE_INIT = "INIT"
SOURCE_UPDATE = "UPDATE"


class UnknownPreset(ValueError):
    pass


def preset(name: str) -> tuple[float, float, float]:
    """(C_g, C_p, C_w) of a named preset: SSO1, SSO2 or SSO3."""
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class SsoConfig:
    """Optimizer control block.

    ``c_g <= c_p <= c_w`` are the cumulative branch thresholds; the residual
    ``1 - c_w`` is the probability of a fresh uniform draw.  ``frozen_gbest``
    switches to the non-canonical mode where a whole generation updates
    against the global best as of the generation start.
    """

    c_g: float
    c_p: float
    c_w: float
    n_sol: int = 30
    n_gen: int = 20
    n_run: int = 30
    early_stop: bool = False
    seed: int = 0
    update_order: str = "left_to_right"
    frozen_gbest: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.c_g <= self.c_p <= self.c_w <= 1.0:
            raise ValueError(
                f"need 0 <= c_g <= c_p <= c_w <= 1, got ({self.c_g}, {self.c_p}, {self.c_w})"
            )
        for name in ("n_sol", "n_gen", "n_run"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.update_order != "left_to_right":
            raise ValueError(f"unsupported update order {self.update_order!r}")

    @classmethod
    def from_preset(cls, name: str, **kwargs) -> "SsoConfig":
        c_g, c_p, c_w = preset(name)
        return cls(c_g, c_p, c_w, **kwargs)


def update_variable(
    rng: random.Random,
    j: int,
    x_ij: int,
    p_ij: int,
    g_j: int,
    bounds,
    cfg: SsoConfig,
) -> tuple[int, str]:
    """One stepwise update of variable ``j``: returns (new value, branch tag).

    Exactly one uniform draw decides the branch; inherited values are forced
    into the current bound, and only the R branch draws a second random value.
    """
    rho = rng.random()
    if rho < cfg.c_g:
        return bounds.nearest(g_j), "G"
    if rho < cfg.c_p:
        return bounds.nearest(p_ij), "P"
    if rho < cfg.c_w:
        return bounds.nearest(x_ij), "X"
    return bounds.sample(rng), "R"


@dataclass
class SwarmState:
    """Population bookkeeping for one run."""

    solutions: list[HyperparamVector]
    pbest: list[HyperparamVector]
    pbest_fitness: list[float]
    gbest_index: int
    baseline: HyperparamVector
    baseline_fitness: float
    generation: int = 0

    @property
    def gbest(self) -> HyperparamVector:
        return self.pbest[self.gbest_index]

    @property
    def gbest_fitness(self) -> float:
        return self.pbest_fitness[self.gbest_index]


def _update_vector(
    rng: random.Random,
    current: HyperparamVector,
    personal: HyperparamVector,
    global_best: HyperparamVector,
    space: SearchSpace,
    cfg: SsoConfig,
) -> tuple[HyperparamVector, str]:
    prefix: list[int] = []
    tags: list[str] = []
    x_vals = current.values()
    p_vals = personal.values()
    g_vals = global_best.values()
    for j in range(1, NUM_VARIABLES + 1):
        bounds = space.bounds_for(j, prefix)
        value, tag = update_variable(rng, j, x_vals[j - 1], p_vals[j - 1], g_vals[j - 1], bounds, cfg)
        prefix.append(value)
        tags.append(tag)
    return HyperparamVector.from_values(prefix), "".join(tags)


def update_solution(
    rng: random.Random,
    i: int,
    state: SwarmState,
    space: SearchSpace,
    cfg: SsoConfig,
) -> tuple[HyperparamVector, str]:
    """Update solution at list position ``i`` against the current swarm state.

    Variables are rewritten left to right with bounds derived from the new
    values of the earlier variables, so the result always validates.
    """
    return _update_vector(rng, state.solutions[i], state.pbest[i], state.gbest, space, cfg)


@dataclass(frozen=True)
class EvaluationLogEntry:
    """One evaluation event: who was evaluated when, and what it scored.

    ``solution`` is 1-based; 0 marks the baseline reference evaluation.
    ``branch_tags`` is the 16-character branch string (G/P/X/R per variable)
    for UPDATE entries and None otherwise.
    """

    run: int
    generation: int
    solution: int
    vector: HyperparamVector
    fitness: float
    source: str
    branch_tags: str | None
    eval_time: float
    timestamp: str
    cached: bool = False


@dataclass
class RunResult:
    """Outcome of one optimization run."""

    run_index: int
    best_vector: HyperparamVector
    best_fitness: float
    baseline_fitness: float
    wins_generation: int | None
    generations: int
    entries: list[EvaluationLogEntry] = field(default_factory=list)

    @property
    def eval_seconds(self) -> float:
        return sum(e.eval_time for e in self.entries)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def run_sso(
    cfg: SsoConfig,
    evaluator: Evaluator,
    input_shape: ImageShape,
    *,
    space: SearchSpace | None = None,
    run_index: int = 0,
    on_entry: Callable[[EvaluationLogEntry], None] | None = None,
) -> RunResult:
    """One full optimization run.

    Flow: evaluate the fixed baseline reference, sample and evaluate the
    initial population, then iterate generations of sequential per-solution
    updates.  The global best index moves as soon as a personal best overtakes
    it, so later solutions within a generation exploit it immediately (unless
    ``cfg.frozen_gbest`` pins the generation's reference).  After the initial
    population and after every generation, the run stops early when
    ``cfg.early_stop`` is set and the swarm best strictly exceeds the baseline
    fitness.

    On evaluator failure the partial entry log is preserved on the raised
    :class:`EvaluatorFailure` as ``partial_entries``.
    """
    if space is None:
        space = SearchSpace(input_shape)
    rng = random.Random(cfg.seed)
    entries: list[EvaluationLogEntry] = []

    def evaluate(vec: HyperparamVector, solution: int, generation: int) -> FitnessRecord:
        try:
            return evaluator.evaluate(vec)
        except EvaluatorFailure as exc:
            exc.solution_index = solution
            exc.generation = generation
            exc.partial_entries = entries  # type: ignore[attr-defined]
            raise

    def record(
        generation: int,
        solution: int,
        vec: HyperparamVector,
        rec: FitnessRecord,
        source: str,
        tags: str | None,
    ) -> None:
        entry = EvaluationLogEntry(
            run=run_index,
            generation=generation,
            solution=solution,
            vector=vec,
            fitness=rec.fitness,
            source=source,
            branch_tags=tags,
            eval_time=rec.eval_time,
            timestamp=_utc_now(),
            cached=rec.cached,
        )
        entries.append(entry)
        if on_entry is not None:
            on_entry(entry)

    baseline = baseline_vector()
    baseline_rec = evaluate(baseline, 0, 0)
    record(0, 0, baseline, baseline_rec, SOURCE_BASELINE, None)

    state = SwarmState([], [], [], 0, baseline, baseline_rec.fitness)
    for i in range(cfg.n_sol):
        vec = space.sample_vector(rng)
        rec = evaluate(vec, i + 1, 0)
        record(0, i + 1, vec, rec, SOURCE_INIT, None)
        state.solutions.append(vec)
        state.pbest.append(vec)
        state.pbest_fitness.append(rec.fitness)
        if rec.fitness > state.gbest_fitness:
            state.gbest_index = i

    wins_generation: int | None = None
    if state.gbest_fitness > state.baseline_fitness:
        wins_generation = 0
    generations = 0

    if not (cfg.early_stop and wins_generation is not None):
        for t in range(1, cfg.n_gen + 1):
            state.generation = t
            frozen_gbest = state.gbest if cfg.frozen_gbest else None
            for i in range(cfg.n_sol):
                reference = frozen_gbest if frozen_gbest is not None else state.gbest
                vec, tags = _update_vector(
                    rng, state.solutions[i], state.pbest[i], reference, space, cfg
                )
                rec = evaluate(vec, i + 1, t)
                record(t, i + 1, vec, rec, SOURCE_UPDATE, tags)
                state.solutions[i] = vec
                if rec.fitness > state.pbest_fitness[i]:
                    state.pbest[i] = vec
                    state.pbest_fitness[i] = rec.fitness
                    if state.pbest_fitness[i] > state.gbest_fitness:
                        state.gbest_index = i
            generations = t
            if wins_generation is None and state.gbest_fitness > state.baseline_fitness:
                wins_generation = t
            if cfg.early_stop and wins_generation is not None:
                break

    return RunResult(
        run_index=run_index,
        best_vector=state.gbest,
        best_fitness=state.gbest_fitness,
        baseline_fitness=state.baseline_fitness,
        wins_generation=wins_generation,
        generations=generations,
        entries=entries,
    )
