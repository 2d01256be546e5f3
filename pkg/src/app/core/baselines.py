"""Comparison pipelines and deployment accounting.

Classical time-domain features, the fully-connected autoencoder, the GAP
head ablation, and parameter / memory / FLOP / latency counts.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
import logging
import time
from typing import Sequence

import numpy as np

from app.config import CLASSIFIER, FCAE, ClassifierConfig
from app.core.classifier import build_classifier
from app.core.errors import ShapeError
from app.nn.graph import LayerSpec, ModelGraph
from app.nn.initializers import build_graph
from data.enums import LayerKind

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("mav", "var", "zc", "ssc", "wl", "rms")
BYTES_PER_VALUE = 4


# -- classical features ---------------------------------------------------------

def classical_features(segment: np.ndarray, deadband: float = 0.01) -> np.ndarray:
    """Six time-domain features per channel, channel-major: ``[mav, var, zc, ssc, wl, rms] x C``."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 2:
        raise ShapeError(f"expected a [T, C] segment, got {segment.shape}")
    values = []
    for x in segment.T:
        diff = np.diff(x)
        zero_crossings = np.count_nonzero((x[:-1] * x[1:] < 0) & (np.abs(diff) >= deadband))
        slope_changes = np.count_nonzero((x[1:-1] - x[:-2]) * (x[1:-1] - x[2:]) > deadband)
        variance = float(np.var(x, ddof=1)) if x.size > 1 else 0.0
        values.extend(
            [
                float(np.mean(np.abs(x))),
                variance,
                float(zero_crossings),
                float(slope_changes),
                float(np.sum(np.abs(diff))),
                float(np.sqrt(np.mean(x**2))),
            ]
        )
    return np.asarray(values)


def classical_feature_matrix(segments: np.ndarray, deadband: float = 0.01) -> np.ndarray:
    return np.stack([classical_features(segment, deadband) for segment in segments]) if len(segments) else np.zeros((0, 12))


def feature_names(channels: int = 2) -> list[str]:
    return [f"ch{channel + 1}_{name}" for channel in range(channels) for name in FEATURE_NAMES]


# -- fully-connected autoencoder ------------------------------------------------

def build_fcae(
    hidden_widths: Sequence[int] = FCAE.hidden_widths,
    latent_width: int = FCAE.latent_width,
    seed: int = 0,
    *,
    segment_length: int = 1000,
    channels: int = 2,
    alpha: float = FCAE.alpha,
) -> ModelGraph:
    """Flatten -> dense encoder -> latent -> mirrored dense decoder -> unflatten."""
    if any(width < 1 for width in hidden_widths) or latent_width < 1:
        raise ShapeError("FCAE widths must be >= 1")
    flat = segment_length * channels
    widths = [flat, *hidden_widths]
    layers = [LayerSpec(LayerKind.FLATTEN, "flatten")]
    for position, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        layers.append(LayerSpec(LayerKind.DENSE, f"enc_dense_{position}", fan_in, fan_out))
        layers.append(LayerSpec(LayerKind.LEAKY_RELU, f"enc_act_{position}", alpha=alpha))
    layers.append(LayerSpec(LayerKind.DENSE, "latent", widths[-1], latent_width))
    layers.append(LayerSpec(LayerKind.LEAKY_RELU, "latent_act", alpha=alpha))
    encoder_depth = len(layers)
    mirrored = [latent_width, *reversed(widths[1:])]
    for position, (fan_in, fan_out) in enumerate(zip(mirrored[:-1], mirrored[1:]), start=1):
        layers.append(LayerSpec(LayerKind.DENSE, f"dec_dense_{position}", fan_in, fan_out))
        layers.append(LayerSpec(LayerKind.LEAKY_RELU, f"dec_act_{position}", alpha=alpha))
    layers.append(LayerSpec(LayerKind.DENSE, "reconstruction", mirrored[-1], flat))
    layers.append(LayerSpec(LayerKind.UNFLATTEN, "unflatten", shape=(segment_length, channels)))
    return build_graph(
        layers,
        (segment_length, channels),
        seed,
        encoder_depth=encoder_depth,
        latent_layer="latent_act",
        name="fcae",
    )


def gap_head_variant(encoder: ModelGraph, config: ClassifierConfig = CLASSIFIER, seed: int = 0) -> ModelGraph:
    """The standard head with attention pooling swapped for the unweighted time-mean."""
    return build_classifier(encoder, dataclasses.replace(config, pooling="gap"), seed)


# -- resource accounting -------------------------------------------------------

@dataclass(frozen=True)
class ResourceReport:
    parameters: int
    static_bytes: int
    runtime_bytes: int
    flops: int

    @property
    def static_mb(self) -> float:
        return self.static_bytes / 1e6


COUNTING_RULES = (
    "static = 4 bytes x parameters; "
    "runtime = 4 bytes x max over layers of (input + output elements) per sample; "
    "flops = 2 per multiply-accumulate + 1 per bias add; layer norm 7, leaky ReLU 1, "
    "softmax 3 per element; attention 4TD + 4T; GAP TD + D"
)


def _layer_flops(layer: LayerSpec, in_shape: tuple[int, ...], out_shape: tuple[int, ...]) -> int:
    kind = layer.kind
    if kind is LayerKind.CONV1D:
        steps, channels = out_shape
        return steps * channels * 2 * layer.kernel_size * layer.in_channels + steps * channels
    if kind is LayerKind.TCONV1D:
        steps_in = in_shape[0]
        steps, channels = out_shape
        return steps_in * layer.in_channels * layer.kernel_size * channels * 2 + steps * channels
    if kind is LayerKind.DENSE:
        return 2 * layer.in_channels * layer.out_channels + layer.out_channels
    elements = int(np.prod(out_shape))
    if kind is LayerKind.LAYER_NORM:
        return 7 * elements
    if kind is LayerKind.LEAKY_RELU:
        return elements
    if kind is LayerKind.SOFTMAX:
        return 3 * elements
    if kind is LayerKind.ATTENTION_POOL:
        steps, width = in_shape
        return 4 * steps * width + 4 * steps
    if kind is LayerKind.GLOBAL_AVG_POOL:
        steps, width = in_shape
        return steps * width + width
    return 0


def resource_report(graph: ModelGraph, start: int = 0, stop: int | None = None) -> ResourceReport:
    """Deterministic counts for layers ``start:stop`` of ``graph`` (see COUNTING_RULES)."""
    shapes = graph.shapes()
    stop = len(graph.layers) if stop is None else stop
    in_shape = tuple(graph.input_shape) if start == 0 else shapes[start - 1]
    peak = 0
    flops = 0
    for position in range(start, stop):
        layer = graph.layers[position]
        out_shape = shapes[position]
        peak = max(peak, int(np.prod(in_shape)) + int(np.prod(out_shape)))
        flops += _layer_flops(layer, in_shape, out_shape)
        in_shape = out_shape
    parameters = graph.parameter_count(start, stop)
    return ResourceReport(
        parameters=parameters,
        static_bytes=BYTES_PER_VALUE * parameters,
        runtime_bytes=BYTES_PER_VALUE * peak,
        flops=flops,
    )


def measure_latency(graph: ModelGraph, sample: np.ndarray, repeats: int = 20, warmup: int = 3) -> float:
    """Mean single-sample forward latency in milliseconds."""
    batch = np.asarray(sample, dtype=np.float64)[np.newaxis]
    for _ in range(warmup):
        graph.forward(batch)
    started = time.perf_counter()
    for _ in range(repeats):
        graph.forward(batch)
    return (time.perf_counter() - started) * 1000.0 / max(repeats, 1)
