"""Few-shot user calibration and 6 -> 10 class head expansion."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from app.config import ADAPTATION, AdaptationConfig
from app.core.classifier import DENSE_LAYERS, OUTPUT_LAYER, evaluate, fit_head, num_outputs, predict_labels
from app.core.errors import CalibrationError, DataError, LeakageError
from app.core.evaluation import ConfusionMatrix, FoldReport, confusion, per_class_prf
from app.core.signals import SegmentSet
from app.core.training import TrainLog
from app.nn.graph import ModelGraph
from app.nn.initializers import derive_seed, he_normal_init
from data.enums import FreezePolicy, MovementClass

logger = logging.getLogger(__name__)

CALIB_TRIAL = 1
CALIB_VAL_TRIAL = 2


def policy_layers(graph: ModelGraph, policy: FreezePolicy) -> list[str]:
    """Names of the layers a policy leaves trainable; never an encoder layer."""
    head = [layer.name for layer in graph.layers[graph.encoder_depth :] if layer.kind.has_params]
    if policy is FreezePolicy.FINAL_DENSE_ONLY:
        return [name for name in head if name in DENSE_LAYERS]
    if policy is FreezePolicy.NEW_OUTPUT_ONLY:
        return [OUTPUT_LAYER]
    return head


def apply_freeze_policy(graph: ModelGraph, policy: FreezePolicy) -> ModelGraph:
    graph.set_trainable(policy_layers(graph, policy))
    graph.params.reset_optimizer()
    return graph


def _check_provenance(segments: SegmentSet, trial: int, what: str, subject: int | None) -> int:
    if len(segments) == 0:
        raise CalibrationError(f"{what} set is empty")
    subjects = set(segments.subjects.tolist())
    trials = set(segments.trials.tolist())
    if trials != {trial}:
        raise LeakageError(f"{what} must come from trial {trial} only, found trials {sorted(trials)}")
    if len(subjects) != 1 or (subject is not None and subjects != {subject}):
        raise LeakageError(f"{what} must come from the target subject only, found subjects {sorted(subjects)}")
    return subjects.pop()


def calibration_subset(calib: SegmentSet, fraction: float) -> SegmentSet:
    """Leading ``ceil(fraction * n)`` segments of every class, in recording order."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"calibration fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return calib
    mask = np.zeros(len(calib), dtype=bool)
    for label in np.unique(calib.labels):
        index = np.flatnonzero(calib.labels == label)
        mask[index[: max(1, math.ceil(fraction * index.size))]] = True
    return calib.subset(mask)


def finetune_user(
    pretrained: ModelGraph,
    calib: SegmentSet,
    calib_val: SegmentSet,
    policy: FreezePolicy | None = None,
    config: AdaptationConfig = ADAPTATION,
    *,
    target_subject: int | None = None,
    progress: bool = False,
) -> tuple[ModelGraph, TrainLog]:
    """Adapt a copy of ``pretrained`` to one user from calibration trials 1 and 2."""
    policy = policy or config.policy
    subject = _check_provenance(calib, CALIB_TRIAL, "calibration", target_subject)
    _check_provenance(calib_val, CALIB_VAL_TRIAL, "calibration validation", subject)
    k = num_outputs(pretrained)
    missing = sorted(set(range(k)) - calib.classes())
    if missing:
        labels = MovementClass.labels(k)
        logger.warning("Data kalibrasi subjek %s tidak memuat kelas %s", subject, [labels[c] for c in missing])
        raise CalibrationError(f"calibration set misses classes {missing} for subject {subject}")

    tuned = pretrained.copy()
    tuned.name = f"{pretrained.name}_s{subject}"
    apply_freeze_policy(tuned, policy)
    log = fit_head(
        tuned,
        calibration_subset(calib, config.calib_fraction),
        calib_val,
        config.finetune,
        desc=f"finetune s{subject}",
        progress=progress,
    )
    return tuned, log


def expand_head(graph: ModelGraph, new_classes: int = 10, seed: int = 0) -> ModelGraph:
    """Widen the output layer; old class columns are copied and new ones He-Normal initialized."""
    old = graph.layer(OUTPUT_LAYER)
    old_classes = old.out_channels
    if new_classes <= old_classes:
        raise ValueError(f"new class count {new_classes} must exceed the current {old_classes}")
    expanded = graph.copy()
    expanded.name = f"{graph.name.rsplit('_k', 1)[0]}_k{new_classes}"
    layer = expanded.layer(OUTPUT_LAYER)
    layer.out_channels = new_classes
    weight = graph.params[OUTPUT_LAYER]["weight"]
    bias = graph.params[OUTPUT_LAYER]["bias"]
    fresh = he_normal_init((weight.shape[0], new_classes - old_classes), layer.fan_in(), derive_seed(seed, 2000, new_classes))
    expanded.params.tensors[OUTPUT_LAYER] = {
        "weight": np.concatenate([weight, fresh], axis=1),
        "bias": np.concatenate([bias, np.zeros(new_classes - old_classes)]),
    }
    expanded.params.reset_optimizer()
    expanded.shapes()
    return expanded


@dataclass
class ClassDelta:
    class_id: int
    label: str
    f1_before: float
    f1_after: float


@dataclass
class ForgettingReport:
    deltas: list[ClassDelta]
    # true original class x predicted class over the expanded label set
    confusion_rows: np.ndarray
    before: FoldReport
    after_matrix: ConfusionMatrix


@dataclass
class ExpansionReport:
    phase1_metrics: FoldReport
    phase2_metrics: FoldReport
    phase1_log: TrainLog
    phase2_log: TrainLog
    forgetting: ForgettingReport | None = None
    extras: dict[str, float] = field(default_factory=dict)

    @property
    def old_class_delta(self) -> list[ClassDelta]:
        return [] if self.forgetting is None else self.forgetting.deltas


def train_two_phase(
    graph: ModelGraph,
    train: SegmentSet,
    val: SegmentSet,
    config: AdaptationConfig = ADAPTATION,
    *,
    evaluate_on: SegmentSet | None = None,
    fold_id: int | None = None,
    progress: bool = False,
) -> tuple[ModelGraph, ExpansionReport]:
    """Phase I trains only the output layer; Phase II continues from Phase I's
    best parameters with the whole head unfrozen at the lower learning rate.
    """
    target = evaluate_on if evaluate_on is not None else val
    apply_freeze_policy(graph, FreezePolicy.NEW_OUTPUT_ONLY)
    phase1_log = fit_head(graph, train, val, config.phase1, desc="expansion phase I", progress=progress)
    phase1_metrics = evaluate(graph, target, fold_id)

    apply_freeze_policy(graph, FreezePolicy.FULL_HEAD)
    phase2_log = fit_head(graph, train, val, config.phase2, desc="expansion phase II", progress=progress)
    phase2_metrics = evaluate(graph, target, fold_id)
    logger.info(
        "Expansion fold %s: phase I F1=%.4f, phase II F1=%.4f",
        fold_id,
        phase1_metrics.micro_f1,
        phase2_metrics.micro_f1,
    )
    return graph, ExpansionReport(phase1_metrics, phase2_metrics, phase1_log, phase2_log)


def forgetting_report(original: ModelGraph, expanded: ModelGraph, test_original: SegmentSet) -> ForgettingReport:
    """Per-class F1 on the original classes before and after expansion."""
    old_classes = num_outputs(original)
    new_classes = num_outputs(expanded)
    if test_original.labels.size and test_original.labels.max() >= old_classes:
        raise DataError(f"forgetting analysis needs labels in [0, {old_classes})")
    before_matrix = confusion(test_original.labels, predict_labels(original, test_original), old_classes)
    before = FoldReport(per_class_prf(before_matrix), _safe_micro(before_matrix), before_matrix)
    after_matrix = confusion(test_original.labels, predict_labels(expanded, test_original), new_classes)
    after_scores = per_class_prf(after_matrix)
    labels = MovementClass.labels(new_classes)
    deltas = [
        ClassDelta(c, labels[c], before.per_class[c].f1, after_scores[c].f1) for c in range(old_classes)
    ]
    return ForgettingReport(deltas, after_matrix.counts[:old_classes].copy(), before, after_matrix)


def _safe_micro(matrix: ConfusionMatrix) -> float:
    total = matrix.total
    return float(np.trace(matrix.counts)) / total if total else 0.0
