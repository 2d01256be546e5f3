from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np

from app.core.errors import NumericalError
from app.nn.graph import LayerSpec, ModelGraph
from app.nn.initializers import build_graph, derive_seed
from app.nn.objectives import Objective, RegressionObjective
from data.enums import LayerKind

logger = logging.getLogger(__name__)

# relative errors are measured against max(|analytic|, |numeric|, floor)
RELATIVE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    probes: int = 0

    @property
    def max_relative_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tol

    def per_layer(self) -> dict[str, float]:
        layers: dict[str, float] = {}
        for key, error in self.per_tensor.items():
            layer = key.split(".", 1)[0]
            layers[layer] = max(layers.get(layer, 0.0), error)
        return layers


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_FLOOR)


def _probe_indices(size: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or limit >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def gradient_check(
    graph: ModelGraph,
    loss: Objective,
    x: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
    *,
    max_probes: int | None = None,
    check_input: bool = True,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences (f(w+h) - f(w-h)) / 2h.

    Every trainable parameter element and input element is probed unless
    ``max_probes`` caps the number of elements sampled per tensor.
    """
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    base = loss(graph, x, need_grad=True, need_input_grad=check_input)
    if not np.isfinite(base.total):
        raise NumericalError("loss at the probe point is not finite")
    report = GradCheckReport(tol=tol)

    def value() -> float:
        return loss(graph, x, need_grad=False).total

    for layer_name in graph.trainable_layers():
        analytic_group = base.grads.get(layer_name, {})
        for name, weight in graph.params.tensors[layer_name].items():
            analytic = analytic_group.get(name, np.zeros_like(weight))
            flat = weight.reshape(-1)
            worst = 0.0
            for index in _probe_indices(flat.size, max_probes, rng):
                original = flat[index]
                flat[index] = original + h
                plus = value()
                flat[index] = original - h
                minus = value()
                flat[index] = original
                numeric = (plus - minus) / (2.0 * h)
                worst = max(worst, _relative_error(float(analytic.reshape(-1)[index]), numeric))
                report.probes += 1
            report.per_tensor[f"{layer_name}.{name}"] = worst

    if check_input and base.input_grad is not None:
        flat_x = x.reshape(-1)
        analytic_x = base.input_grad.reshape(-1)
        worst = 0.0
        for index in _probe_indices(flat_x.size, max_probes, rng):
            original = flat_x[index]
            flat_x[index] = original + h
            plus = value()
            flat_x[index] = original - h
            minus = value()
            flat_x[index] = original
            worst = max(worst, _relative_error(float(analytic_x[index]), (plus - minus) / (2.0 * h)))
            report.probes += 1
        report.per_tensor["input"] = worst

    logger.debug(
        "Gradient check %s: %d probes, max relative error %.3e",
        graph.name,
        report.probes,
        report.max_relative_error,
    )
    return report


@dataclass
class GradCheckCase:
    name: str
    graph: ModelGraph
    loss: Objective
    x: np.ndarray


def _case(name: str, layers: list[LayerSpec], input_shape: tuple[int, ...], seed: int, batch: int = 2) -> GradCheckCase:
    graph = build_graph(layers, input_shape, seed, name=name)
    rng = np.random.default_rng(derive_seed(seed, 17))
    x = rng.normal(size=(batch, *input_shape))
    target = rng.normal(size=(batch, *graph.output_shape))
    return GradCheckCase(name, graph, RegressionObjective(target), x)


def layer_kind_cases(seed: int = 0) -> list[GradCheckCase]:
    """One small graph per layer kind, each scored with a squared-error loss."""
    return [
        _case("conv1d", [LayerSpec(LayerKind.CONV1D, "conv", 2, 3, 3, 2)], (11, 2), seed),
        _case("tconv1d", [LayerSpec(LayerKind.TCONV1D, "tconv", 3, 2, 4, 3)], (5, 3), seed),
        _case("dense", [LayerSpec(LayerKind.DENSE, "dense", 6, 4)], (6,), seed),
        _case("layer_norm", [LayerSpec(LayerKind.LAYER_NORM, "norm", 4)], (5, 4), seed),
        _case(
            "leaky_relu",
            [LayerSpec(LayerKind.CONV1D, "conv", 2, 3, 3, 1), LayerSpec(LayerKind.LEAKY_RELU, "act", alpha=0.1)],
            (8, 2),
            seed,
        ),
        _case("attention_pool", [LayerSpec(LayerKind.ATTENTION_POOL, "attention", 4)], (6, 4), seed),
        _case(
            "global_avg_pool",
            [LayerSpec(LayerKind.CONV1D, "conv", 2, 3, 2, 1), LayerSpec(LayerKind.GLOBAL_AVG_POOL, "gap")],
            (6, 2),
            seed,
        ),
        _case(
            "flatten",
            [
                LayerSpec(LayerKind.FLATTEN, "flatten"),
                LayerSpec(LayerKind.DENSE, "dense", 8, 8),
                LayerSpec(LayerKind.UNFLATTEN, "unflatten", shape=(4, 2)),
            ],
            (4, 2),
            seed,
        ),
        _case(
            "softmax",
            [LayerSpec(LayerKind.DENSE, "dense", 5, 3), LayerSpec(LayerKind.SOFTMAX, "softmax")],
            (5,),
            seed,
        ),
    ]
