"""Supervised head on the frozen encoder.

layer norm -> conv1d + leaky ReLU -> attention (or GAP) pooling
-> dense + leaky ReLU -> dense + leaky ReLU -> dense(K) -> softmax
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
import logging

import numpy as np

from app.config import CLASSIFIER, ClassifierConfig, TrainConfig
from app.core.errors import DataError, ShapeError
from app.core.evaluation import FoldReport, fold_report
from app.core.signals import SegmentSet
from app.core.training import TrainLog, fit
from app.nn import ops
from app.nn.graph import LayerSpec, ModelGraph, ParamSet
from app.nn.initializers import derive_seed, init_layer
from app.nn.objectives import ClassificationObjective, logits_stop
from data.enums import LayerKind

logger = logging.getLogger(__name__)

OUTPUT_LAYER = "output"
DENSE_LAYERS = ("dense_1", "dense_2", OUTPUT_LAYER)


@dataclass
class Prediction:
    probs: np.ndarray
    argmax: int
    logits: np.ndarray


def extract_latent(encoder: ModelGraph, segments: SegmentSet) -> np.ndarray:
    """Encoder features ``[N, T', D]``; a forward pass only, nothing is updated."""
    if tuple(segments.segments.shape[1:]) != tuple(encoder.input_shape):
        raise ShapeError(f"segments of shape {segments.segments.shape[1:]} do not fit encoder input {encoder.input_shape}")
    if encoder.encoder_depth < 1:
        raise ShapeError(f"{encoder.name} has no encoder layers")
    return encoder.predict(segments.segments, stop=encoder.encoder_depth)


def _head_layers(config: ClassifierConfig, features: int) -> list[LayerSpec]:
    channels, kernel, stride = config.head_conv
    width_1, width_2 = config.mlp_widths
    if config.pooling == "attention":
        pool = LayerSpec(LayerKind.ATTENTION_POOL, "attention", channels)
    else:
        pool = LayerSpec(LayerKind.GLOBAL_AVG_POOL, "gap")
    return [
        LayerSpec(LayerKind.LAYER_NORM, "norm", features, eps=config.norm_eps),
        LayerSpec(LayerKind.CONV1D, "head_conv", features, channels, kernel, stride),
        LayerSpec(LayerKind.LEAKY_RELU, "head_act", alpha=config.alpha),
        pool,
        LayerSpec(LayerKind.DENSE, "dense_1", channels, width_1),
        LayerSpec(LayerKind.LEAKY_RELU, "dense_act_1", alpha=config.alpha),
        LayerSpec(LayerKind.DENSE, "dense_2", width_1, width_2),
        LayerSpec(LayerKind.LEAKY_RELU, "dense_act_2", alpha=config.alpha),
        LayerSpec(LayerKind.DENSE, OUTPUT_LAYER, width_2, config.num_classes),
        LayerSpec(LayerKind.SOFTMAX, "softmax"),
    ]


def build_classifier(encoder: ModelGraph, config: ClassifierConfig = CLASSIFIER, seed: int = 0) -> ModelGraph:
    """Copy the encoder layers (frozen) and stack a freshly initialized head on them."""
    if encoder.encoder_depth < 1:
        raise ShapeError(f"{encoder.name} has no encoder layers")
    latent = encoder.latent_shape
    if len(latent) != 2:
        raise ShapeError(f"the classifier head needs a (T', D) latent map, got {latent}")
    encoder_layers = [copy.deepcopy(layer) for layer in encoder.layers[: encoder.encoder_depth]]
    for layer in encoder_layers:
        layer.trainable = False
    params = ParamSet(
        tensors={
            layer.name: {name: array.copy() for name, array in encoder.params.tensors[layer.name].items()}
            for layer in encoder_layers
            if layer.name in encoder.params
        }
    )
    head = _head_layers(config, latent[1])
    for position, layer in enumerate(head):
        group = init_layer(layer, derive_seed(seed, 1000 + position))
        if group:
            params.tensors[layer.name] = group
    graph = ModelGraph(
        layers=encoder_layers + head,
        params=params,
        input_shape=tuple(encoder.input_shape),
        encoder_depth=len(encoder_layers),
        latent_layer=encoder.latent_layer,
        name=f"classifier_{config.pooling}",
    )
    logger.debug("Built %s: %d head parameters", graph.name, graph.parameter_count(start=graph.encoder_depth))
    return graph


def num_outputs(graph: ModelGraph) -> int:
    return int(graph.layer(OUTPUT_LAYER).out_channels)


def fit_head(
    graph: ModelGraph,
    train: SegmentSet,
    val: SegmentSet,
    config: TrainConfig,
    *,
    desc: str = "classifier",
    progress: bool = False,
) -> TrainLog:
    """Cross-entropy training of the trainable head layers on cached encoder features."""
    k = num_outputs(graph)
    for name, labels in (("train", train.labels), ("validation", val.labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise DataError(f"{name} labels must lie in [0, {k})")
    graph.freeze_encoder()
    depth = graph.encoder_depth
    train_features = graph.predict(train.segments, stop=depth)
    val_features = graph.predict(val.segments, stop=depth) if len(val) else np.zeros((0, *graph.latent_shape))

    def make_objective(targets: np.ndarray | None) -> ClassificationObjective:
        return ClassificationObjective(ops.one_hot(targets, k), start=depth)

    return fit(
        graph,
        make_objective,
        train_features,
        val_features,
        config,
        train_targets=train.labels,
        val_targets=val.labels,
        desc=desc,
        progress=progress,
    )


def train_classifier(
    graph: ModelGraph,
    train: SegmentSet,
    val: SegmentSet,
    config: ClassifierConfig = CLASSIFIER,
    *,
    progress: bool = False,
) -> tuple[ModelGraph, TrainLog]:
    log = fit_head(graph, train, val, config.train, desc=graph.name, progress=progress)
    return graph, log


def predict_logits(graph: ModelGraph, segments: SegmentSet) -> np.ndarray:
    if tuple(segments.segments.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(f"segments of shape {segments.segments.shape[1:]} do not fit {graph.name} input {graph.input_shape}")
    return graph.predict(segments.segments, stop=logits_stop(graph))


def predict(graph: ModelGraph, segments: SegmentSet) -> list[Prediction]:
    logits = predict_logits(graph, segments)
    probs = ops.softmax(logits)
    # np.argmax returns the first maximal index
    return [Prediction(p, int(np.argmax(p)), z) for p, z in zip(probs, logits)]


def predict_labels(graph: ModelGraph, segments: SegmentSet) -> np.ndarray:
    if len(segments) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(predict_logits(graph, segments), axis=1)


def evaluate(graph: ModelGraph, segments: SegmentSet, fold_id: int | None = None) -> FoldReport:
    return fold_report(segments.labels, predict_labels(graph, segments), num_outputs(graph), fold_id)
