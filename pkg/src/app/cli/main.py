from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from datetime import datetime, timezone
import logging
import math
from pathlib import Path
import sys
from typing import Callable, Dict, Sequence

import numpy as np

from app.config import RunConfig, build_run_config, load_config_file
from app.core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.core.classifier import OUTPUT_LAYER, build_classifier, evaluate, num_outputs, train_classifier
from app.core.csae import build_csae, reconstruct_r2, train_autoencoder
from app.core.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericalError,
    PipelineError,
    ShapeError,
)
from app.core.evaluation import cv_aggregate, render_table
from app.core.experiments import (
    FoldData,
    calibrate_fold,
    classifier_config_for,
    csae_config_for,
    fold_plans,
    fold_seed,
    load_recordings,
    load_segments,
    prepare_fold,
    run_bench,
    run_expansion,
    run_loso,
    run_sweep,
)
from app.core.reports import (
    ensure_output_dir,
    render_report_dir,
    write_config,
    write_confusion_rows,
    write_fig6,
    write_fig6_grid,
    write_fig7,
    write_fold_scores,
    write_gradcheck,
    write_latency,
    write_run_manifest,
    write_table1,
    write_table2,
    write_table3,
    write_table4,
)
from app.core.signals import export_trials_csv
from app.core.training import write_train_log
from app.logging_config import setup_logging
from app.nn import ops
from app.nn.gradcheck import GradCheckCase, gradient_check, layer_kind_cases
from app.nn.graph import ModelGraph
from app.nn.initializers import derive_seed
from app.nn.objectives import ClassificationObjective, ReconstructionObjective
from data.enums import MovementClass

logger = logging.getLogger(__name__)

# ===== ANSI Colors =====
RESET = "\033[0m"

RED = "\033[31m"
GREEN = "\033[32m"
CYAN = "\033[36m"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4

GRADCHECK_TOL = 1e-4
# the CSAE penalty is raised to this floor so the L1 gradient is visible to the check
GRADCHECK_MIN_LAMBDA = 1e-3


def _paint(text: str, color: str) -> str:
    if not sys.stdout.isatty():
        return text
    return f"{color}{text}{RESET}"


@dataclass
class CommandContext:
    args: argparse.Namespace
    run: RunConfig
    out_dir: Path
    files: list[Path] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)

    @property
    def progress(self) -> bool:
        return bool(self.args.progress)

    def add(self, *paths: Path) -> None:
        self.files.extend(paths)


# -- config resolution ------------------------------------------------------------

_FLAG_KEYS = {
    "data": "data_dir",
    "classes": "num_classes",
    "lam": "csae.lambda",
    "lambdas": "lambdas",
    "filters": "bottleneck_filters",
    "out": "output_dir",
    "calib_fraction": "adaptation.calib_fraction",
    "folds": "folds",
}


def flag_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if args.synthetic or args.command == "gen-synthetic":
        overrides["synthetic"] = "true"
    if args.seed is not None:
        for key in ("seed", "train.seed", "forest.seed"):
            overrides[key] = str(args.seed)
    return overrides


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file entries first, command-line flags on top."""
    overrides = load_config_file(args.config) if args.config else {}
    overrides.update(flag_overrides(args))
    return build_run_config(overrides)


# -- commands ----------------------------------------------------------------------

def gradcheck_cases(run: RunConfig) -> list[GradCheckCase]:
    cases = layer_kind_cases(run.seed)
    config = csae_config_for(run)
    csae = build_csae(config, run.seed)
    x = np.random.default_rng(derive_seed(run.seed, 23)).normal(size=(2, *csae.input_shape))
    cases.append(GradCheckCase("csae", csae, ReconstructionObjective(max(config.lam, GRADCHECK_MIN_LAMBDA)), x))
    classifier_config = classifier_config_for(run)
    head = build_classifier(csae, classifier_config, run.seed)
    targets = ops.one_hot(np.arange(2) % classifier_config.num_classes, classifier_config.num_classes)
    cases.append(GradCheckCase("classifier", head, ClassificationObjective(targets), x))
    return cases


def cmd_gradcheck(ctx: CommandContext) -> int:
    rows: list[tuple[str, str, float]] = []
    failed = []
    for case in gradcheck_cases(ctx.run):
        report = gradient_check(
            case.graph,
            case.loss,
            case.x,
            tol=ctx.args.tol,
            max_probes=ctx.args.probes,
            seed=ctx.run.seed,
        )
        for layer, error in report.per_layer().items():
            color = GREEN if error < ctx.args.tol else RED
            print(f"{case.name:<16} {layer:<16} {_paint(f'{error:.3e}', color)}")
        rows.extend((case.name, tensor, error) for tensor, error in report.per_tensor.items())
        if not report.passed:
            failed.append(case.name)
    ctx.add(write_gradcheck(ctx.out_dir / "gradcheck.csv", rows))
    worst = max((error for _, _, error in rows), default=0.0)
    if failed:
        print(_paint(f"gradient check FAILED ({', '.join(failed)}): max relative error {worst:.3e}", RED))
        return EXIT_GRADCHECK
    print(_paint(f"gradient check passed: max relative error {worst:.3e} < {ctx.args.tol:g}", GREEN))
    return EXIT_OK


def cmd_gen_synthetic(ctx: CommandContext) -> int:
    recordings = load_recordings(ctx.run)
    data_dir = ctx.out_dir / "data"
    for subject in sorted({recording.subject_id for recording in recordings}):
        path = export_trials_csv(
            [recording for recording in recordings if recording.subject_id == subject],
            data_dir / f"subject_{subject:02d}.csv",
        )
        ctx.add(path)
    ctx.seeds["synthetic"] = ctx.run.seed
    print(_paint(f"Selesai menulis {len(recordings)} rekaman ke {data_dir}", GREEN))
    return EXIT_OK


def _single_fold(ctx: CommandContext, standardizer=None) -> tuple[FoldData, int]:
    segments = load_segments(ctx.run)
    plan = fold_plans(ctx.run, segments, ctx.args.target)[0]
    fold = prepare_fold(segments, plan, standardizer)
    seed = fold_seed(ctx.run, fold.target)
    ctx.seeds[f"fold_{fold.target}"] = seed
    return fold, seed


def _train_csae(ctx: CommandContext, fold: FoldData, seed: int) -> ModelGraph:
    config = csae_config_for(ctx.run)
    graph = build_csae(config, seed)
    _, log = train_autoencoder(graph, fold.train, fold.val, config, progress=ctx.progress)
    ctx.add(
        save_checkpoint(graph, fold.standardizer, ctx.out_dir / "csae.ckpt", seed=seed, lam=config.lam),
        write_train_log(log, ctx.out_dir / "csae_train_log.csv"),
    )
    r2_train = reconstruct_r2(graph, fold.train)
    r2_val = reconstruct_r2(graph, fold.val) if len(fold.val) else math.nan
    print(f"CSAE target {fold.target}: R2 train={r2_train:.4f} val={r2_val:.4f} ({log.stop_reason.value})")
    return graph


def cmd_train_ae(ctx: CommandContext) -> int:
    fold, seed = _single_fold(ctx)
    _train_csae(ctx, fold, seed)
    return EXIT_OK


def cmd_train_clf(ctx: CommandContext) -> int:
    if ctx.args.encoder:
        checkpoint = load_checkpoint(ctx.args.encoder)
        if checkpoint.graph.encoder_depth < 1:
            raise CheckpointError(f"{ctx.args.encoder} holds no encoder")
        fold, seed = _single_fold(ctx, checkpoint.standardizer)
        encoder = checkpoint.graph
    else:
        fold, seed = _single_fold(ctx)
        encoder = _train_csae(ctx, fold, seed)
    config = classifier_config_for(ctx.run)
    head = build_classifier(encoder, config, seed)
    _, log = train_classifier(head, fold.train, fold.val, config, progress=ctx.progress)
    report = evaluate(head, fold.test, fold.target)
    labels = MovementClass.labels(ctx.run.num_classes)
    ctx.add(
        save_checkpoint(head, fold.standardizer, ctx.out_dir / "classifier.ckpt", labels=labels, seed=seed),
        write_train_log(log, ctx.out_dir / "classifier_train_log.csv"),
        write_table1(ctx.out_dir / "table1.csv", cv_aggregate([report]), labels),
    )
    print(f"Classifier target {fold.target}: source test micro-F1 {_paint(f'{report.micro_f1:.4f}', CYAN)}")
    return EXIT_OK


def _classifier_checkpoint(path: Path) -> Checkpoint:
    checkpoint = load_checkpoint(path)
    if OUTPUT_LAYER not in {layer.name for layer in checkpoint.graph.layers}:
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    if checkpoint.standardizer is None:
        raise CheckpointError(f"{path} carries no standardizer")
    return checkpoint


def cmd_finetune(ctx: CommandContext) -> int:
    if ctx.args.target is None:
        raise ConfigError("finetune needs --target <subject>")
    checkpoint = _classifier_checkpoint(ctx.args.model)
    classes = num_outputs(checkpoint.graph)
    if classes != ctx.run.num_classes:
        raise ConfigError(f"model predicts {classes} classes, run is configured for {ctx.run.num_classes} (--classes)")
    fold, _ = _single_fold(ctx, checkpoint.standardizer)
    pre, post, tuned, log = calibrate_fold(ctx.run, fold, checkpoint.graph, progress=ctx.progress)
    labels = checkpoint.labels or MovementClass.labels(classes)
    ctx.add(
        save_checkpoint(tuned, fold.standardizer, ctx.out_dir / "finetuned.ckpt", labels=labels, seed=checkpoint.seed),
        write_train_log(log, ctx.out_dir / "finetune_train_log.csv"),
        write_table2(ctx.out_dir / "table2.csv", cv_aggregate([pre]), cv_aggregate([post]), labels),
    )
    print(f"Target {fold.target}: micro-F1 {pre.micro_f1:.4f} -> {_paint(f'{post.micro_f1:.4f}', CYAN)}")
    return EXIT_OK


def cmd_loso(ctx: CommandContext) -> int:
    run, out = ctx.run, ctx.out_dir
    result = run_loso(run, load_segments(run), progress=ctx.progress)
    labels = result.labels
    ctx.add(
        write_table1(out / "table1.csv", result.source_summary, labels),
        write_table2(out / "table2.csv", result.pre_summary, result.post_summary, labels),
        write_fold_scores(
            out / "folds.csv",
            [fold.target for fold in result.folds],
            {
                "source_f1": [fold.source.micro_f1 for fold in result.folds],
                "pre_finetune_f1": [fold.pre_finetune.micro_f1 for fold in result.folds],
                "post_finetune_f1": [fold.post_finetune.micro_f1 for fold in result.folds],
                "r2": [fold.pipeline.r2 for fold in result.folds],
            },
        ),
    )
    for fold in result.folds:
        fold_dir = out / f"fold_{fold.target:02d}"
        seed = fold_seed(run, fold.target)
        ctx.seeds[f"fold_{fold.target}"] = seed
        ctx.add(
            save_checkpoint(fold.pipeline.classifier, fold.standardizer, fold_dir / "classifier.ckpt", labels=labels, seed=seed),
            save_checkpoint(fold.tuned, fold.standardizer, fold_dir / "finetuned.ckpt", labels=labels, seed=seed),
            write_train_log(fold.pipeline.csae_log, fold_dir / "csae_train_log.csv"),
            write_train_log(fold.pipeline.classifier_log, fold_dir / "classifier_train_log.csv"),
            write_train_log(fold.finetune_log, fold_dir / "finetune_train_log.csv"),
        )
    print(render_table({"source": result.source_summary}, labels))
    print()
    print(render_table({"original": result.pre_summary, "fine-tuned": result.post_summary}, labels))
    return EXIT_OK


def cmd_expand(ctx: CommandContext) -> int:
    run, out = ctx.run, ctx.out_dir
    result = run_expansion(run, load_segments(run), progress=ctx.progress)
    labels = result.labels
    before, after = result.forgetting_means()
    base_labels = labels[: len(before)]
    for fold in result.folds:
        ctx.seeds[f"fold_{fold.target}"] = fold_seed(run, fold.target)
    ctx.add(
        write_table3(out / "table3.csv", result.phase1_summary, result.phase2_summary, labels),
        write_fig7(out / "fig7.csv", base_labels, before, after),
        write_confusion_rows(out / "fig7_confusion.csv", base_labels, labels, result.confusion_rows()),
    )
    print(render_table({"phase I": result.phase1_summary, "phase II": result.phase2_summary}, labels))
    for label, old, new in zip(base_labels, before, after):
        color = RED if new < old else GREEN
        print(f"{label:<24} {old:.4f} -> {_paint(f'{new:.4f}', color)}")
    return EXIT_OK


def cmd_sweep_lambda(ctx: CommandContext) -> int:
    run, out = ctx.run, ctx.out_dir
    result = run_sweep(run, load_segments(run), progress=ctx.progress)
    ctx.seeds[f"fold_{result.target}"] = fold_seed(run, result.target)
    ctx.add(write_fig6(out / "fig6.csv", result.points))
    if result.grid:
        ctx.add(write_fig6_grid(out / "fig6_grid.csv", result.grid))
    for point in result.points:
        print(f"lambda={point.lam:<10g} F1={point.f1:.4f} mean|Z|={point.mean_abs_z:.4g} R2={point.r2:.4f}")
    return EXIT_OK


def cmd_bench(ctx: CommandContext) -> int:
    run, out = ctx.run, ctx.out_dir
    rows = run_bench(run, load_segments(run), progress=ctx.progress)
    ctx.add(write_table4(out / "table4.csv", rows), write_latency(out / "latency.csv", rows))
    for row in rows:
        size = "-" if row.static_bytes is None else f"{row.static_bytes / 1e6:.3f} MB"
        print(f"{row.method:<18} F1={row.f1.mean:.4f} static={size}")
    return EXIT_OK


def cmd_report(ctx: CommandContext) -> int:
    print(render_report_dir(ctx.out_dir))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[CommandContext], int]] = {
    "gradcheck": cmd_gradcheck,
    "gen-synthetic": cmd_gen_synthetic,
    "train-ae": cmd_train_ae,
    "train-clf": cmd_train_clf,
    "loso": cmd_loso,
    "finetune": cmd_finetune,
    "expand": cmd_expand,
    "sweep-lambda": cmd_sweep_lambda,
    "bench": cmd_bench,
    "report": cmd_report,
}

_HELP = {
    "gradcheck": "finite-difference check of every layer kind, the CSAE and the classifier",
    "gen-synthetic": "write a synthetic two-channel dataset as CSV",
    "train-ae": "train the CSAE on one LOSO fold",
    "train-clf": "train the classifier head on one LOSO fold",
    "loso": "leave-one-subject-out evaluation with user calibration",
    "finetune": "calibrate a saved classifier to one target subject",
    "expand": "6 -> 10 class expansion with two-phase training",
    "sweep-lambda": "sparsity sweep (and optional bottleneck width grid)",
    "bench": "compare CSAE against the baselines, with deployment cost",
    "report": "print the tables found in --out",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", type=Path, help="directory (or single file) of recording CSVs")
    common.add_argument("--synthetic", action="store_true", help="use the built-in synthetic generator")
    common.add_argument("--classes", type=int, choices=(6, 10), help="number of movement classes")
    common.add_argument("--lambda", dest="lam", type=float, help="L1 sparsity weight of the CSAE")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--calib-fraction", type=float, help="share of the calibration segments per class, in (0, 1]")
    common.add_argument("--config", type=Path, help="key = value config file, applied before the flags")
    common.add_argument("--folds", type=int, help="run only the first N LOSO folds (0 = all)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--progress", action="store_true", help="show progress bars")

    parser = argparse.ArgumentParser(prog="semg", description="Sparse convolutional autoencoder sEMG pipeline")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub = {name: commands.add_parser(name, parents=[common], help=text) for name, text in _HELP.items()}

    sub["gradcheck"].add_argument("--tol", type=float, default=GRADCHECK_TOL)
    sub["gradcheck"].add_argument("--probes", type=int, default=16, help="elements probed per tensor")
    for name in ("train-ae", "train-clf", "finetune"):
        sub[name].add_argument("--target", type=int, help="held-out subject (default: first fold)")
    sub["train-clf"].add_argument("--encoder", type=Path, help="CSAE checkpoint to reuse instead of training one")
    sub["finetune"].add_argument("--model", type=Path, required=True, help="classifier checkpoint")
    sub["sweep-lambda"].add_argument("--lambdas", help="comma-separated lambda values (must include 0)")
    sub["sweep-lambda"].add_argument("--filters", help="comma-separated bottleneck widths for the grid")
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if not exc.code else EXIT_USAGE

    setup_logging(args.log_level)
    logger.info("Menjalankan perintah %s", args.command)
    started_at = datetime.now(timezone.utc)
    try:
        run = resolve_run_config(args)
        if args.command == "report":
            return cmd_report(CommandContext(args, run, Path(run.output_dir)))
        ctx = CommandContext(args, run, ensure_output_dir(run.output_dir))
        ctx.add(write_config(ctx.out_dir, run))
        status = COMMANDS[args.command](ctx)
        write_run_manifest(ctx.out_dir, run, args.command, started_at, ctx.files, ctx.seeds)
        return status
    except (ConfigError, ShapeError) as exc:
        logger.exception("Konfigurasi tidak valid: %s", exc)
        print(_paint(f"error: {exc}", RED), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        logger.exception("Numerical failure: %s", exc)
        print(_paint(f"numerical failure: {exc}", RED), file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PipelineError) as exc:
        logger.exception("Gagal memproses data: %s", exc)
        print(_paint(f"data error: {exc}", RED), file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
