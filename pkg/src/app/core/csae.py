"""Convolutional sparse autoencoder: assembly, training and the lambda/width sweeps."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
import logging
from typing import Sequence

import numpy as np
from tqdm import tqdm

from app.config import CSAE, CLASSIFIER, ClassifierConfig, CsaeConfig, FcaeConfig
from app.core.classifier import build_classifier, evaluate, train_classifier
from app.core.errors import ConfigError, DataError, ShapeError
from app.core.signals import DataSplits, SegmentSet
from app.core.training import TrainLog, fit
from app.nn import ops
from app.nn.graph import LayerSpec, ModelGraph
from app.nn.initializers import build_graph
from app.nn.objectives import ReconstructionObjective
from data.enums import LayerKind

logger = logging.getLogger(__name__)

LATENT_LAYER = "bottleneck_act"


def build_csae(config: CsaeConfig = CSAE, seed: int = 0) -> ModelGraph:
    """Encoder: two strided conv blocks and the bottleneck conv. Decoder: two
    transposed-conv blocks mirroring Conv II and Conv I, then a stride-1 layer
    whose kernel is solved so the reconstruction is exactly ``segment_length``
    samples long.
    """
    length, channels = config.segment_length, config.channels
    (f1, f2, width), (k1, k2, k3), (s1, s2, s3) = config.filters, config.kernel_sizes, config.strides
    alpha = config.alpha
    encoder = [
        LayerSpec(LayerKind.CONV1D, "conv_1", channels, f1, k1, s1),
        LayerSpec(LayerKind.LEAKY_RELU, "act_1", alpha=alpha),
        LayerSpec(LayerKind.CONV1D, "conv_2", f1, f2, k2, s2),
        LayerSpec(LayerKind.LEAKY_RELU, "act_2", alpha=alpha),
        LayerSpec(LayerKind.CONV1D, "bottleneck", f2, width, k3, s3),
        LayerSpec(LayerKind.LEAKY_RELU, LATENT_LAYER, alpha=alpha),
    ]
    try:
        latent_steps = ops.conv_output_length(
            ops.conv_output_length(ops.conv_output_length(length, k1, s1), k2, s2), k3, s3
        )
    except ShapeError as exc:
        raise ShapeError(f"encoder cannot process {length}-sample segments: {exc}") from exc
    if latent_steps >= length:
        raise ShapeError(f"latent length {latent_steps} must be shorter than the segment ({length})")

    upsampled = ops.tconv_output_length(ops.tconv_output_length(latent_steps, k2, s2), k1, s1)
    if upsampled <= length:
        final = LayerSpec(LayerKind.TCONV1D, "reconstruction", f1, channels, length - upsampled + 1, 1)
    else:
        final = LayerSpec(LayerKind.CONV1D, "reconstruction", f1, channels, upsampled - length + 1, 1)
    decoder = [
        LayerSpec(LayerKind.TCONV1D, "tconv_1", width, f2, k2, s2),
        LayerSpec(LayerKind.LEAKY_RELU, "tact_1", alpha=alpha),
        LayerSpec(LayerKind.TCONV1D, "tconv_2", f2, f1, k1, s1),
        LayerSpec(LayerKind.LEAKY_RELU, "tact_2", alpha=alpha),
        final,
    ]
    graph = build_graph(
        encoder + decoder,
        (length, channels),
        seed,
        encoder_depth=len(encoder),
        latent_layer=LATENT_LAYER,
        name="csae",
    )
    if graph.output_shape != (length, channels):
        raise ShapeError(f"decoder restores {graph.output_shape}, expected {(length, channels)}")
    logger.debug("Built CSAE: latent %s, %d parameters", graph.latent_shape, graph.parameter_count())
    return graph


def train_autoencoder(
    graph: ModelGraph,
    train: SegmentSet,
    val: SegmentSet,
    config: CsaeConfig | FcaeConfig = CSAE,
    *,
    progress: bool = False,
) -> tuple[ModelGraph, TrainLog]:
    """Minimize reconstruction MSE plus the latent L1 penalty.

    Labels are never read. The validation metric is the full objective.
    """
    objective = ReconstructionObjective(lam=config.lam)
    log = fit(
        graph,
        lambda _targets: objective,
        train.segments,
        val.segments,
        config.train,
        desc=f"{graph.name} lambda={config.lam:g}",
        progress=progress,
    )
    return graph, log


def r2_score(x: np.ndarray, x_hat: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    ss_tot = float(np.sum((x - x.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("R^2 is undefined for a zero-variance set")
    return 1.0 - float(np.sum((x - x_hat) ** 2)) / ss_tot


def reconstruct_r2(graph: ModelGraph, segments: SegmentSet) -> float:
    return r2_score(segments.segments, graph.predict(segments.segments))


def mean_abs_latent(graph: ModelGraph, segments: SegmentSet) -> float:
    if graph.latent_layer is None:
        raise ShapeError(f"{graph.name} has no latent layer")
    z = graph.predict(segments.segments, stop=graph.index(graph.latent_layer) + 1)
    return float(np.mean(np.abs(z)))


@dataclass
class SweepPoint:
    filters: int
    lam: float
    f1: float
    mean_abs_z: float
    r2: float


def _train_and_score(
    csae_config: CsaeConfig,
    classifier_config: ClassifierConfig,
    splits: DataSplits,
    seed: int,
    progress: bool,
) -> SweepPoint:
    graph = build_csae(csae_config, seed)
    train_autoencoder(graph, splits.train, splits.val, csae_config, progress=progress)
    head = build_classifier(graph, classifier_config, seed)
    train_classifier(head, splits.train, splits.val, classifier_config, progress=progress)
    report = evaluate(head, splits.test)
    point = SweepPoint(
        filters=csae_config.bottleneck_width,
        lam=csae_config.lam,
        f1=report.micro_f1,
        mean_abs_z=mean_abs_latent(graph, splits.train),
        r2=reconstruct_r2(graph, splits.train),
    )
    logger.info("D=%d lambda=%g: F1=%.4f mean|Z|=%.4g R2=%.4f", point.filters, point.lam, point.f1, point.mean_abs_z, point.r2)
    return point


def sweep_lambda(
    lambdas: Sequence[float],
    splits: DataSplits,
    config: CsaeConfig = CSAE,
    classifier_config: ClassifierConfig = CLASSIFIER,
    seed: int = 0,
    *,
    progress: bool = False,
) -> list[SweepPoint]:
    """One CSAE and one downstream classifier per lambda, rows in ascending lambda.

    Every point starts from the same initial parameters so the points differ
    only in the penalty.
    """
    if 0.0 not in [float(value) for value in lambdas]:
        raise ConfigError("the lambda sweep must include 0 as the unpenalized reference")
    points = []
    for lam in tqdm(sorted(float(value) for value in lambdas), desc="lambda sweep", unit="lambda", disable=not progress):
        points.append(_train_and_score(dataclasses.replace(config, lam=lam), classifier_config, splits, seed, progress))
    return points


def sweep_bottleneck(
    filters: Sequence[int],
    splits: DataSplits,
    config: CsaeConfig = CSAE,
    classifier_config: ClassifierConfig = CLASSIFIER,
    seed: int = 0,
    *,
    lambdas: Sequence[float] | None = None,
    progress: bool = False,
) -> list[SweepPoint]:
    """Downstream F1 per bottleneck width, at ``config.lam`` or over a lambda grid."""
    grid = [config.lam] if lambdas is None else sorted(float(value) for value in lambdas)
    points = []
    for width in filters:
        if width < 1:
            raise ConfigError(f"bottleneck width must be >= 1, got {width}")
        width_config = dataclasses.replace(config, filters=(*config.filters[:2], int(width)))
        for lam in grid:
            points.append(
                _train_and_score(dataclasses.replace(width_config, lam=lam), classifier_config, splits, seed, progress)
            )
    return points
