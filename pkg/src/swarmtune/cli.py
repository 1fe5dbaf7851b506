"""Command-line interface.

Exit codes are a stable contract: 0 success, 2 usage or parse errors,
3 infeasible vector, 4 evaluator failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence

from . import __version__
from .evaluation import (
    DATASETS,
    EvaluatorFailure,
    TrainSpec,
    build_evaluator,
)
from .experiment import (
    ArchiveError,
    LAYER_COLUMNS,
    RunArchive,
    aspect_table,
    export_runs_csv,
    export_summary_csv,
    read_archive,
    run_experiment,
    summarize,
)
from .shapes import (
    Aspect,
    ImageShape,
    InfeasibleShape,
    classify_aspect,
    parameter_count,
    propagate_shapes,
)
from .space import HyperparamVector, validate
from .sso import PRESETS, SsoConfig, preset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_EVALUATOR = 4

_ASPECT_ROWS = ((Aspect.WIDER, "x>y"), (Aspect.TALLER, "x<y"), (Aspect.SQUARE, "x=y"))


class _UsageError(Exception):
    pass


def _parse_vector(text: str) -> HyperparamVector:
    try:
        return HyperparamVector.from_text(text)
    except ValueError as exc:
        raise _UsageError(f"bad --config value: {exc}") from exc


def _parse_input(text: str) -> ImageShape:
    try:
        return ImageShape.parse(text)
    except ValueError as exc:
        raise _UsageError(f"bad --input value: {exc}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swarmtune", description=__doc__)
    parser.add_argument("--version", action="version", version=f"swarmtune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_vector_input(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="16 dash-separated integers")
        p.add_argument("--input", required=True, help="input image as WxHxC, e.g. 28x28x1")
        p.add_argument("--classes", type=int, default=10, help="number of output classes")

    p_shapes = sub.add_parser("shapes", help="trace per-layer feature-map shapes")
    add_vector_input(p_shapes)

    p_params = sub.add_parser("params", help="count trainable parameters")
    add_vector_input(p_params)

    p_validate = sub.add_parser("validate", help="check a vector against its bounds")
    add_vector_input(p_validate)

    p_opt = sub.add_parser("optimize", help="run the swarm search")
    p_opt.add_argument("--dataset", required=True, choices=sorted(DATASETS))
    p_opt.add_argument("--preset", default="SSO1", choices=sorted(PRESETS))
    p_opt.add_argument("--cg", type=float, help="override preset: cumulative g-branch threshold")
    p_opt.add_argument("--cp", type=float, help="override preset: cumulative p-branch threshold")
    p_opt.add_argument("--cw", type=float, help="override preset: cumulative keep-branch threshold")
    p_opt.add_argument("--gens", type=int, default=20)
    p_opt.add_argument("--sols", type=int, default=30)
    p_opt.add_argument("--runs", type=int, default=30)
    p_opt.add_argument("--seed", type=int, default=None, help="default: $SWARMTUNE_SEED or 1")
    p_opt.add_argument("--early-stop", action="store_true", help="stop once the baseline is beaten")
    p_opt.add_argument(
        "--evaluator",
        default="surrogate:param_target",
        choices=["surrogate:param_target", "surrogate:separable", "external"],
    )
    p_opt.add_argument("--target-params", type=int, help="target for surrogate:param_target")
    p_opt.add_argument("--trainer-cmd", help="worker command for --evaluator external")
    p_opt.add_argument("--epochs", type=int, default=10)
    p_opt.add_argument("--train-subset", type=int)
    p_opt.add_argument("--test-subset", type=int)
    p_opt.add_argument("--timeout", type=float, default=600.0, help="per-evaluation timeout (s)")
    p_opt.add_argument("--out", default="swarmtune_archive.jsonl", help="archive output path")
    p_opt.add_argument("--parallel-runs", type=int, default=1)
    p_opt.add_argument("--frozen-gbest", action="store_true", help="non-canonical concurrent-update semantics")

    p_report = sub.add_parser("report", help="summarize an archive")
    p_report.add_argument("--in", dest="archive", required=True, help="archive file to read")
    p_report.add_argument("--csv-prefix", help="also write <prefix>_runs.csv and <prefix>_summary.csv")
    return parser


def _cmd_shapes(args: argparse.Namespace) -> int:
    vector = _parse_vector(args.config)
    input_shape = _parse_input(args.input)
    violations = validate(vector, input_shape)
    if violations:
        for v in violations:
            print(f"infeasible: {v}", file=sys.stderr)
        return EXIT_INFEASIBLE
    trace = propagate_shapes(vector, input_shape)
    for name, shape in zip(LAYER_COLUMNS, trace.layers()):
        print(f"{name:7s} {shape} ({classify_aspect(shape).value})")
    print(f"flatten {trace.flatten}")
    print(f"params  {parameter_count(vector, input_shape, args.classes)}")
    return EXIT_OK


def _cmd_params(args: argparse.Namespace) -> int:
    vector = _parse_vector(args.config)
    input_shape = _parse_input(args.input)
    violations = validate(vector, input_shape)
    if violations:
        for v in violations:
            print(f"infeasible: {v}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(parameter_count(vector, input_shape, args.classes))
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    vector = _parse_vector(args.config)
    input_shape = _parse_input(args.input)
    violations = validate(vector, input_shape)
    if violations:
        for v in violations:
            print(str(v))
        return EXIT_INFEASIBLE
    print("ok")
    return EXIT_OK


def _render_summary(archive: RunArchive) -> str:
    s = summarize(archive)
    head = "Acc(max)\tAcc(min)\tAcc(mean)\tAcc(std)\tTime(mean)\tTotal Time"
    row = (
        f"{s.acc_max:.6f}\t{s.acc_min:.6f}\t{s.acc_mean:.6f}\t{s.acc_std:.6f}"
        f"\t{s.time_mean:.3f}\t{s.total_time:.3f}"
    )
    return f"runs: {s.n_runs}\n{head}\n{row}"


def _render_aspects(archive: RunArchive) -> str:
    counts = aspect_table(archive)
    lines = ["\t" + "\t".join(LAYER_COLUMNS)]
    for aspect, label in _ASPECT_ROWS:
        lines.append(label + "\t" + "\t".join(str(counts[layer][aspect]) for layer in LAYER_COLUMNS))
    return "\n".join(lines)


def _cmd_optimize(args: argparse.Namespace) -> int:
    seed = args.seed
    if seed is None:
        env = os.environ.get("SWARMTUNE_SEED")
        try:
            seed = int(env) if env else 1
        except ValueError:
            raise _UsageError(f"SWARMTUNE_SEED must be an integer, got {env!r}")
    overrides = (args.cg, args.cp, args.cw)
    if any(v is not None for v in overrides):
        if any(v is None for v in overrides):
            raise _UsageError("--cg, --cp and --cw must be given together")
        c_g, c_p, c_w = overrides
    else:
        c_g, c_p, c_w = preset(args.preset)
    if args.evaluator == "external" and not args.trainer_cmd:
        raise _UsageError("--evaluator external requires --trainer-cmd")
    try:
        cfg = SsoConfig(
            c_g=c_g,
            c_p=c_p,
            c_w=c_w,
            n_sol=args.sols,
            n_gen=args.gens,
            n_run=args.runs,
            early_stop=args.early_stop,
            seed=seed,
            frozen_gbest=args.frozen_gbest,
        )
        spec = TrainSpec(
            dataset=args.dataset,
            epochs=args.epochs,
            train_subset=args.train_subset,
            test_subset=args.test_subset,
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc

    def factory(run_index: int, run_seed: int):
        return build_evaluator(
            args.evaluator,
            spec,
            target_params=args.target_params,
            trainer_command=args.trainer_cmd,
            run_seed=run_seed,
            timeout=args.timeout,
        )

    try:
        archive = run_experiment(
            cfg,
            spec,
            factory,
            evaluator_label=args.evaluator,
            out_path=args.out,
            parallel_runs=args.parallel_runs,
        )
    except EvaluatorFailure as exc:
        print(f"evaluator failure: {exc} (partial archive kept at {args.out})", file=sys.stderr)
        return EXIT_EVALUATOR
    best = max(archive.run_summaries, key=lambda rs: rs.best_fitness)
    print(_render_summary(archive))
    print(f"best: {best.best_vector} fitness={best.best_fitness:.6f} (run {best.run})")
    print(f"archive: {args.out}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    try:
        archive = read_archive(args.archive)
        print(_render_summary(archive))
        print()
        print(_render_aspects(archive))
        if args.csv_prefix:
            export_runs_csv(archive, f"{args.csv_prefix}_runs.csv")
            export_summary_csv(archive, f"{args.csv_prefix}_summary.csv")
    except ArchiveError as exc:
        print(f"bad archive: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


_COMMANDS = {
    "shapes": _cmd_shapes,
    "params": _cmd_params,
    "validate": _cmd_validate,
    "optimize": _cmd_optimize,
    "report": _cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleShape as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
