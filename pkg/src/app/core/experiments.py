"""Experiment orchestration: LOSO evaluation, user calibration, class
expansion, lambda/width sweeps and the baseline benchmark.

Folds run one after another; rows come out in fold (target subject) order.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
import logging

import numpy as np
from tqdm import tqdm

from app.config import ClassifierConfig, CsaeConfig, RunConfig
from app.core.adaptation import ExpansionReport, expand_head, finetune_user, forgetting_report, train_two_phase
from app.core.baselines import (
    COUNTING_RULES,
    build_fcae,
    classical_feature_matrix,
    gap_head_variant,
    measure_latency,
    resource_report,
)
from app.core.classifier import build_classifier, evaluate, train_classifier
from app.core.csae import SweepPoint, build_csae, reconstruct_r2, sweep_bottleneck, sweep_lambda, train_autoencoder
from app.core.errors import ConfigError, DataError
from app.core.evaluation import CvSummary, FoldReport, cv_aggregate, fold_report
from app.core.forest import forest_fit, forest_predict
from app.core.reports import BenchRow
from app.core.signals import (
    DataSplits,
    SegmentSet,
    SplitPlan,
    Standardizer,
    TrialRecording,
    apply_standardizer,
    fit_standardizer,
    generate_synthetic_dataset,
    load_dataset_dir,
    plan_loso,
    segment_recordings,
    select_roles,
)
from app.core.training import TrainLog
from app.nn.graph import ModelGraph
from app.nn.initializers import derive_seed
from data.enums import MovementClass, SplitRole

logger = logging.getLogger(__name__)

BASE_CLASSES = 6


# -- data ----------------------------------------------------------------------

def load_recordings(run: RunConfig) -> list[TrialRecording]:
    if run.synthetic:
        synthetic = run.synthetic_data
        return generate_synthetic_dataset(
            synthetic.num_subjects,
            run.num_classes,
            synthetic.trials_per_class,
            run.seed,
            duration_s=synthetic.duration_s,
            sampling_rate=synthetic.sampling_rate,
            snr_db=synthetic.snr_db,
            gain_spread=synthetic.gain_spread,
            shift_spread_hz=synthetic.shift_spread_hz,
        )
    if run.data_dir is None:
        raise ConfigError("no data source: pass --data <dir> or --synthetic")
    recordings = [recording for recording in load_dataset_dir(run.data_dir) if recording.movement_class < run.num_classes]
    if not recordings:
        raise DataError(f"no recordings with movement < {run.num_classes} under {run.data_dir}")
    return recordings


def load_segments(run: RunConfig) -> SegmentSet:
    segments = segment_recordings(load_recordings(run), run.window, run.window_stride)
    logger.info(
        "Segmented %d windows from %d subjects",
        len(segments),
        len(np.unique(segments.subjects)),
    )
    return segments


def restrict_classes(segments: SegmentSet, num_classes: int) -> SegmentSet:
    return segments.subset(segments.labels < num_classes)


@dataclass
class FoldData:
    plan: SplitPlan
    standardizer: Standardizer
    train: SegmentSet
    val: SegmentSet
    test: SegmentSet
    calib: SegmentSet
    calib_val: SegmentSet
    adapt_test: SegmentSet

    @property
    def target(self) -> int:
        return self.plan.target_subject

    @property
    def source_splits(self) -> DataSplits:
        return DataSplits(self.train, self.val, self.test)

    def restricted(self, num_classes: int) -> "FoldData":
        return dataclasses.replace(
            self,
            **{
                name: restrict_classes(getattr(self, name), num_classes)
                for name in ("train", "val", "test", "calib", "calib_val", "adapt_test")
            },
        )


def prepare_fold(segments: SegmentSet, plan: SplitPlan, standardizer: Standardizer | None = None) -> FoldData:
    """Split by role and standardize everything with statistics of the source training trials.

    A ``standardizer`` restored from a checkpoint is reused as is; the
    evaluation roles are still checked against the trials it was fitted on.
    """
    train = select_roles(segments, plan, SplitRole.TRAIN)
    if standardizer is None:
        standardizer = fit_standardizer(train, description=f"source train, target {plan.target_subject}")

    def transform(role: SplitRole) -> SegmentSet:
        return apply_standardizer(standardizer, select_roles(segments, plan, role), evaluation=True)

    return FoldData(
        plan=plan,
        standardizer=standardizer,
        train=apply_standardizer(standardizer, train),
        val=transform(SplitRole.VAL),
        test=transform(SplitRole.TEST),
        calib=transform(SplitRole.CALIB),
        calib_val=transform(SplitRole.CALIB_VAL),
        adapt_test=transform(SplitRole.ADAPT_TEST),
    )


def fold_plans(run: RunConfig, segments: SegmentSet, target: int | None = None) -> list[SplitPlan]:
    plans = plan_loso(sorted(np.unique(segments.subjects).tolist()))
    if target is not None:
        chosen = [plan for plan in plans if plan.target_subject == target]
        if not chosen:
            raise DataError(f"target subject {target} is not in the data")
        return chosen
    return plans[: run.folds] if run.folds else plans


def csae_config_for(run: RunConfig) -> CsaeConfig:
    return dataclasses.replace(run.csae, segment_length=run.window)


def classifier_config_for(run: RunConfig, num_classes: int | None = None) -> ClassifierConfig:
    return dataclasses.replace(run.classifier, num_classes=num_classes or run.num_classes)


def fold_seed(run: RunConfig, target: int) -> int:
    return derive_seed(run.seed, target)


# -- base pipeline ---------------------------------------------------------------

@dataclass
class TrainedPipeline:
    csae: ModelGraph
    classifier: ModelGraph
    csae_log: TrainLog
    classifier_log: TrainLog
    r2: float


def train_pipeline(
    run: RunConfig,
    splits: DataSplits,
    seed: int,
    *,
    num_classes: int | None = None,
    lam: float | None = None,
    progress: bool = False,
) -> TrainedPipeline:
    csae_config = csae_config_for(run)
    if lam is not None:
        csae_config = dataclasses.replace(csae_config, lam=lam)
    graph = build_csae(csae_config, seed)
    _, csae_log = train_autoencoder(graph, splits.train, splits.val, csae_config, progress=progress)
    config = classifier_config_for(run, num_classes)
    head = build_classifier(graph, config, seed)
    _, head_log = train_classifier(head, splits.train, splits.val, config, progress=progress)
    return TrainedPipeline(graph, head, csae_log, head_log, reconstruct_r2(graph, splits.train))


# -- LOSO with user calibration --------------------------------------------------------

@dataclass
class LosoFold:
    target: int
    source: FoldReport
    pre_finetune: FoldReport
    post_finetune: FoldReport
    pipeline: TrainedPipeline
    tuned: ModelGraph
    finetune_log: TrainLog
    standardizer: Standardizer


@dataclass
class LosoResult:
    folds: list[LosoFold]
    labels: list[str]

    @property
    def source_summary(self) -> CvSummary:
        return cv_aggregate([fold.source for fold in self.folds])

    @property
    def pre_summary(self) -> CvSummary:
        return cv_aggregate([fold.pre_finetune for fold in self.folds])

    @property
    def post_summary(self) -> CvSummary:
        return cv_aggregate([fold.post_finetune for fold in self.folds])


def calibrate_fold(
    run: RunConfig, fold: FoldData, classifier: ModelGraph, *, progress: bool = False
) -> tuple[FoldReport, FoldReport, ModelGraph, TrainLog]:
    pre = evaluate(classifier, fold.adapt_test, fold.target)
    tuned, log = finetune_user(
        classifier,
        fold.calib,
        fold.calib_val,
        run.adaptation.policy,
        run.adaptation,
        target_subject=fold.target,
        progress=progress,
    )
    post = evaluate(tuned, fold.adapt_test, fold.target)
    return pre, post, tuned, log


def run_loso(run: RunConfig, segments: SegmentSet, *, progress: bool = False) -> LosoResult:
    folds = []
    for plan in tqdm(fold_plans(run, segments), desc="LOSO", unit="fold", disable=not progress):
        fold = prepare_fold(segments, plan)
        pipeline = train_pipeline(run, fold.source_splits, fold_seed(run, fold.target), progress=progress)
        source = evaluate(pipeline.classifier, fold.test, fold.target)
        pre, post, tuned, log = calibrate_fold(run, fold, pipeline.classifier, progress=progress)
        logger.info(
            "Fold %d: source F1=%.4f, target before=%.4f after=%.4f (R2=%.3f)",
            fold.target,
            source.micro_f1,
            pre.micro_f1,
            post.micro_f1,
            pipeline.r2,
        )
        folds.append(LosoFold(fold.target, source, pre, post, pipeline, tuned, log, fold.standardizer))
    return LosoResult(folds, MovementClass.labels(run.num_classes))


# -- class expansion ----------------------------------------------------------------

@dataclass
class ExpansionFold:
    target: int
    report: ExpansionReport
    base: ModelGraph
    expanded: ModelGraph


@dataclass
class ExpansionResult:
    folds: list[ExpansionFold]
    labels: list[str]

    @property
    def phase1_summary(self) -> CvSummary:
        return cv_aggregate([fold.report.phase1_metrics for fold in self.folds])

    @property
    def phase2_summary(self) -> CvSummary:
        return cv_aggregate([fold.report.phase2_metrics for fold in self.folds])

    def forgetting_means(self) -> tuple[list[float], list[float]]:
        before = np.mean([[delta.f1_before for delta in fold.report.old_class_delta] for fold in self.folds], axis=0)
        after = np.mean([[delta.f1_after for delta in fold.report.old_class_delta] for fold in self.folds], axis=0)
        return before.tolist(), after.tolist()

    def confusion_rows(self) -> np.ndarray:
        return np.sum([fold.report.forgetting.confusion_rows for fold in self.folds], axis=0)


def run_expansion(run: RunConfig, segments: SegmentSet, *, progress: bool = False) -> ExpansionResult:
    """Base model on the six single-finger classes, widened to all ten and trained in two phases."""
    if len(segments) == 0:
        raise DataError("class expansion got an empty segment set")
    if run.num_classes <= BASE_CLASSES or segments.labels.max() < BASE_CLASSES:
        raise ConfigError("class expansion needs the 10-class data (--classes 10)")
    new_classes = run.adaptation.new_classes
    folds = []
    for plan in tqdm(fold_plans(run, segments), desc="expansion", unit="fold", disable=not progress):
        fold = prepare_fold(segments, plan)
        base_fold = fold.restricted(BASE_CLASSES)
        seed = fold_seed(run, fold.target)
        pipeline = train_pipeline(run, base_fold.source_splits, seed, num_classes=BASE_CLASSES, progress=progress)
        expanded = expand_head(pipeline.classifier, new_classes, seed)
        expanded, report = train_two_phase(
            expanded,
            fold.train,
            fold.val,
            run.adaptation,
            evaluate_on=fold.test,
            fold_id=fold.target,
            progress=progress,
        )
        report.forgetting = forgetting_report(pipeline.classifier, expanded, base_fold.test)
        folds.append(ExpansionFold(fold.target, report, pipeline.classifier, expanded))
    return ExpansionResult(folds, MovementClass.labels(new_classes))


# -- sweeps ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    points: list[SweepPoint]
    grid: list[SweepPoint] = field(default_factory=list)
    target: int | None = None


def run_sweep(
    run: RunConfig,
    segments: SegmentSet,
    *,
    lambdas: tuple[float, ...] | None = None,
    filters: tuple[int, ...] | None = None,
    progress: bool = False,
) -> SweepResult:
    """Lambda sweep (and optional width grid) on the first LOSO fold's source splits."""
    plan = fold_plans(run, segments)[0]
    fold = prepare_fold(segments, plan)
    seed = fold_seed(run, fold.target)
    lambdas = lambdas or run.lambdas
    filters = filters if filters is not None else run.bottleneck_filters
    csae_config = csae_config_for(run)
    classifier_config = classifier_config_for(run)
    points = sweep_lambda(lambdas, fold.source_splits, csae_config, classifier_config, seed, progress=progress)
    grid = []
    if filters:
        grid = sweep_bottleneck(
            filters, fold.source_splits, csae_config, classifier_config, seed, lambdas=lambdas, progress=progress
        )
    return SweepResult(points, grid, fold.target)


# -- baseline benchmark --------------------------------------------------------------------

METHOD_CSAE = "CSAE"
METHOD_GAP = "CSAE (GAP head)"
METHOD_CAE = "CAE (lambda=0)"
METHOD_CLASSICAL = "Classical + RF"
METHOD_FCAE = "FCAE + RF"
BENCH_METHODS = (METHOD_CSAE, METHOD_GAP, METHOD_CAE, METHOD_CLASSICAL, METHOD_FCAE)


def _forest_report(run: RunConfig, train_x: np.ndarray, fold: FoldData, test_x: np.ndarray, seed: int):
    forest = forest_fit(
        train_x,
        fold.train.labels,
        run.forest.num_trees,
        run.forest.max_depth,
        seed,
        min_samples_split=run.forest.min_samples_split,
        bootstrap=run.forest.bootstrap,
        num_classes=run.num_classes,
    )
    return forest, fold_report(fold.test.labels, forest_predict(forest, test_x), run.num_classes, fold.target)


def run_bench(run: RunConfig, segments: SegmentSet, *, progress: bool = False) -> list[BenchRow]:
    """Micro-F1 (mean ± SE over folds) and deployment cost of every compared pipeline."""
    scores: dict[str, list[FoldReport]] = {method: [] for method in BENCH_METHODS}
    graphs: dict[str, ModelGraph] = {}
    forest_bytes: dict[str, int] = {}
    classifier_config = classifier_config_for(run)
    for plan in tqdm(fold_plans(run, segments), desc="bench", unit="fold", disable=not progress):
        fold = prepare_fold(segments, plan)
        seed = fold_seed(run, fold.target)
        splits = fold.source_splits

        csae = train_pipeline(run, splits, seed, progress=progress)
        scores[METHOD_CSAE].append(evaluate(csae.classifier, fold.test, fold.target))
        gap = gap_head_variant(csae.csae, classifier_config, seed)
        train_classifier(gap, fold.train, fold.val, classifier_config, progress=progress)
        scores[METHOD_GAP].append(evaluate(gap, fold.test, fold.target))
        cae = train_pipeline(run, splits, seed, lam=0.0, progress=progress)
        scores[METHOD_CAE].append(evaluate(cae.classifier, fold.test, fold.target))
        graphs.update({METHOD_CSAE: csae.classifier, METHOD_GAP: gap, METHOD_CAE: cae.classifier})

        deadband = run.forest.deadband
        forest, report = _forest_report(
            run,
            classical_feature_matrix(fold.train.segments, deadband),
            fold,
            classical_feature_matrix(fold.test.segments, deadband),
            seed,
        )
        scores[METHOD_CLASSICAL].append(report)
        forest_bytes[METHOD_CLASSICAL] = forest.serialized_size()

        fcae = build_fcae(run.fcae.hidden_widths, run.fcae.latent_width, seed, segment_length=run.window, alpha=run.fcae.alpha)
        train_autoencoder(fcae, fold.train, fold.val, run.fcae, progress=progress)
        depth = fcae.encoder_depth
        forest, report = _forest_report(
            run,
            fcae.predict(fold.train.segments, stop=depth),
            fold,
            fcae.predict(fold.test.segments, stop=depth),
            seed,
        )
        scores[METHOD_FCAE].append(report)
        forest_bytes[METHOD_FCAE] = forest.serialized_size()
        graphs[METHOD_FCAE] = fcae
        logger.info(
            "Bench fold %d: %s",
            fold.target,
            ", ".join(f"{method}={reports[-1].micro_f1:.4f}" for method, reports in scores.items()),
        )

    rows = []
    for method in BENCH_METHODS:
        summary = cv_aggregate(scores[method])
        if method == METHOD_CLASSICAL:
            rows.append(
                BenchRow(method, summary.micro, forest_bytes[method], None, None, None, "forest serialized size; not comparable")
            )
            continue
        graph = graphs[method]
        if method == METHOD_FCAE:
            resources = resource_report(graph, 0, graph.encoder_depth)
            note = "FCAE encoder only; forest excluded"
            latency = _encoder_latency(graph)
        else:
            resources = resource_report(graph)
            note = COUNTING_RULES if method == METHOD_CSAE else ""
            latency = measure_latency(graph, np.zeros(graph.input_shape))
        rows.append(
            BenchRow(method, summary.micro, resources.static_bytes, resources.runtime_bytes, resources.flops, latency, note)
        )
    return rows


def _encoder_latency(graph: ModelGraph, repeats: int = 20) -> float:
    encoder = dataclasses.replace(
        graph,
        layers=graph.layers[: graph.encoder_depth],
        name=f"{graph.name}_encoder",
    )
    return measure_latency(encoder, np.zeros(graph.input_shape), repeats)
