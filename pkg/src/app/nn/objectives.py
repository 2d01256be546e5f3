from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from app.core.errors import NumericalError
from app.nn import ops
from app.nn.graph import ModelGraph
from data.enums import LayerKind


@dataclass
class LossResult:
    total: float
    parts: dict[str, float] = field(default_factory=dict)
    grads: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    input_grad: np.ndarray | None = None


class Objective(Protocol):
    def __call__(
        self,
        graph: ModelGraph,
        x: np.ndarray,
        *,
        need_grad: bool = True,
        need_input_grad: bool = False,
    ) -> LossResult: ...


def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"{what} is not finite ({value})")
    return value


@dataclass
class ReconstructionObjective:
    """Reconstruction MSE plus the L1 activity penalty on the latent layer.

    Per batch: mean-over-elements MSE + lam * sum|Z| / batch_size.
    """

    lam: float = 0.0

    def __call__(self, graph, x, *, need_grad=True, need_input_grad=False):
        x = np.asarray(x, dtype=np.float64)
        batch = x.shape[0]
        x_hat, record = graph.forward(x, trace=need_grad or need_input_grad)
        if x_hat.shape != x.shape:
            raise NumericalError(f"{graph.name} reconstructs shape {x_hat.shape}, input is {x.shape}")
        mse = ops.mse_loss(x, x_hat)
        l1 = 0.0
        extra: dict[str, np.ndarray] = {}
        if graph.latent_layer is not None and self.lam > 0:
            if record is not None:
                z = record.output_of(graph.index(graph.latent_layer))
            else:
                z = graph.forward(x, stop=graph.index(graph.latent_layer) + 1)[0]
            l1 = ops.l1_activity(z, self.lam) / batch
            if record is not None:
                extra[graph.latent_layer] = ops.l1_activity_grad(z, self.lam) / batch
        total = _finite(mse + l1, f"{graph.name} reconstruction loss")
        result = LossResult(total=total, parts={"mse": mse, "l1": l1})
        if record is not None:
            result.grads, result.input_grad = graph.backward(
                record,
                ops.mse_loss_grad(x, x_hat),
                extra=extra,
                need_input_grad=need_input_grad,
            )
        return result


def logits_stop(graph: ModelGraph) -> int:
    """Index one past the logits layer (the trailing softmax is excluded)."""
    last = graph.layers[-1]
    return len(graph.layers) - 1 if last.kind is LayerKind.SOFTMAX else len(graph.layers)


@dataclass
class ClassificationObjective:
    """Softmax cross-entropy on the graph's logits.

    ``start`` lets the caller feed pre-computed encoder features instead of
    raw segments; the combined softmax/CE gradient ``(p - y) / N`` is pushed
    into the logits layer directly.
    """

    targets: np.ndarray
    start: int = 0

    def __call__(self, graph, x, *, need_grad=True, need_input_grad=False):
        stop = logits_stop(graph)
        logits, record = graph.forward(x, start=self.start, stop=stop, trace=need_grad or need_input_grad)
        probs = ops.softmax(logits)
        loss = _finite(ops.cross_entropy(probs, self.targets), f"{graph.name} cross-entropy")
        result = LossResult(total=loss, parts={"cross_entropy": loss})
        if record is not None:
            result.grads, result.input_grad = graph.backward(
                record,
                ops.softmax_cross_entropy_grad(logits, self.targets),
                need_input_grad=need_input_grad,
            )
        return result


@dataclass
class RegressionObjective:
    """Mean squared error of the graph output against a fixed target."""

    target: np.ndarray

    def __call__(self, graph, x, *, need_grad=True, need_input_grad=False):
        out, record = graph.forward(x, trace=need_grad or need_input_grad)
        loss = _finite(ops.mse_loss(self.target, out), f"{graph.name} regression loss")
        result = LossResult(total=loss, parts={"mse": loss})
        if record is not None:
            result.grads, result.input_grad = graph.backward(
                record, ops.mse_loss_grad(self.target, out), need_input_grad=need_input_grad
            )
        return result
