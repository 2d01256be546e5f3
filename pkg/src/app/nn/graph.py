from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from app.core.errors import ShapeError
from app.nn import ops
from data.enums import LayerKind

PARAM_NAMES = ("weight", "bias")


@dataclass
class LayerSpec:
    kind: LayerKind
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    alpha: float = 0.1
    trainable: bool = True
    eps: float = 1e-5
    # target (T, C) of an unflatten layer
    shape: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ShapeError(f"{self.name}: stride must be >= 1")
        if self.kernel_size < 1:
            raise ShapeError(f"{self.name}: kernel_size must be >= 1")
        if self.kind is LayerKind.LEAKY_RELU and not 0.0 < self.alpha < 1.0:
            raise ShapeError(f"{self.name}: alpha must be in (0, 1)")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k, c_in, c_out = self.kernel_size, self.in_channels, self.out_channels
        if self.kind is LayerKind.CONV1D:
            return {"weight": (k, c_in, c_out), "bias": (c_out,)}
        if self.kind is LayerKind.TCONV1D:
            return {"weight": (k, c_out, c_in), "bias": (c_out,)}
        if self.kind is LayerKind.DENSE:
            return {"weight": (c_in, c_out), "bias": (c_out,)}
        if self.kind is LayerKind.LAYER_NORM:
            return {"weight": (c_in,), "bias": (c_in,)}
        if self.kind is LayerKind.ATTENTION_POOL:
            return {"weight": (c_in,), "bias": (1,)}
        return {}

    def fan_in(self) -> int:
        if self.kind in (LayerKind.CONV1D, LayerKind.TCONV1D):
            return self.kernel_size * self.in_channels
        return self.in_channels

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        kind = self.kind
        if kind is LayerKind.CONV1D:
            self._expect_channels(in_shape, 2)
            return (ops.conv_output_length(in_shape[0], self.kernel_size, self.stride), self.out_channels)
        if kind is LayerKind.TCONV1D:
            self._expect_channels(in_shape, 2)
            return (ops.tconv_output_length(in_shape[0], self.kernel_size, self.stride), self.out_channels)
        if kind is LayerKind.DENSE:
            self._expect_channels(in_shape, 1)
            return (self.out_channels,)
        if kind is LayerKind.LAYER_NORM:
            if in_shape[-1] != self.in_channels:
                raise ShapeError(f"{self.name}: expected {self.in_channels} features, got {in_shape}")
            return in_shape
        if kind in (LayerKind.ATTENTION_POOL, LayerKind.GLOBAL_AVG_POOL):
            if len(in_shape) != 2:
                raise ShapeError(f"{self.name}: pooling needs a (T, D) input, got {in_shape}")
            return (in_shape[1],)
        if kind is LayerKind.FLATTEN:
            return (int(np.prod(in_shape)),)
        if kind is LayerKind.UNFLATTEN:
            if int(np.prod(self.shape)) != int(np.prod(in_shape)):
                raise ShapeError(f"{self.name}: cannot reshape {in_shape} to {self.shape}")
            return tuple(self.shape)
        return in_shape

    def _expect_channels(self, in_shape: tuple[int, ...], ndim: int) -> None:
        if len(in_shape) != ndim or in_shape[-1] != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected input with {self.in_channels} channels "
                f"({ndim}-d per sample), got {in_shape}"
            )

    def describe(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "name": self.name,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "alpha": self.alpha,
            "trainable": self.trainable,
            "eps": self.eps,
            "shape": list(self.shape),
        }

    @classmethod
    def from_description(cls, raw: dict[str, Any]) -> "LayerSpec":
        return cls(
            kind=LayerKind(raw["kind"]),
            name=raw["name"],
            in_channels=int(raw["in_channels"]),
            out_channels=int(raw["out_channels"]),
            kernel_size=int(raw["kernel_size"]),
            stride=int(raw["stride"]),
            alpha=float(raw["alpha"]),
            trainable=bool(raw["trainable"]),
            eps=float(raw["eps"]),
            shape=tuple(int(v) for v in raw.get("shape", ())),
        )


@dataclass
class ParamSet:
    """Named parameter tensors plus the AdamW moments that mirror them."""

    tensors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    first_moment: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    second_moment: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def __getitem__(self, layer: str) -> dict[str, np.ndarray]:
        return self.tensors[layer]

    def __contains__(self, layer: str) -> bool:
        return layer in self.tensors

    def items(self) -> Iterable[tuple[str, str, np.ndarray]]:
        for layer, group in self.tensors.items():
            for name in PARAM_NAMES:
                if name in group:
                    yield layer, name, group[name]

    def count(self, layers: Iterable[str] | None = None) -> int:
        selected = set(layers) if layers is not None else None
        return sum(
            array.size for layer, _, array in self.items() if selected is None or layer in selected
        )

    def copy(self) -> "ParamSet":
        return copy.deepcopy(self)

    def snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        return {layer: {name: array.copy() for name, array in group.items()} for layer, group in self.tensors.items()}

    def restore(self, snapshot: dict[str, dict[str, np.ndarray]]) -> None:
        for layer, group in snapshot.items():
            for name, array in group.items():
                self.tensors[layer][name] = array.copy()

    def reset_optimizer(self) -> None:
        self.first_moment.clear()
        self.second_moment.clear()
        self.step = 0


@dataclass
class Trace:
    """Per-layer inputs and caches recorded by a forward pass."""

    start: int
    stop: int
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    caches: list[Any] = field(default_factory=list)

    def output_of(self, index: int) -> np.ndarray:
        return self.outputs[index - self.start]


@dataclass
class ModelGraph:
    """Ordered feed-forward layers with named parameters.

    One class serves the autoencoders, the classifier and the FCAE. The
    leading ``encoder_depth`` layers form the encoder; ``latent_layer`` names
    the layer whose output is the latent representation Z.
    """

    layers: list[LayerSpec]
    params: ParamSet
    input_shape: tuple[int, ...]
    encoder_depth: int = 0
    latent_layer: str | None = None
    name: str = "model"

    def __post_init__(self) -> None:
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names in {self.name}")
        self.shapes()

    # -- structure -----------------------------------------------------
    def index(self, name: str) -> int:
        for position, layer in enumerate(self.layers):
            if layer.name == name:
                return position
        raise KeyError(f"{self.name} has no layer {name!r}")

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer, checked against the parameters."""
        shapes: list[tuple[int, ...]] = []
        current = tuple(self.input_shape)
        for layer in self.layers:
            expected = layer.param_shapes()
            if expected:
                group = self.params.tensors.get(layer.name)
                if group is None:
                    raise ShapeError(f"{self.name}: no parameters for layer {layer.name}")
                for key, shape in expected.items():
                    if group[key].shape != shape:
                        raise ShapeError(
                            f"{self.name}.{layer.name}.{key}: expected {shape}, got {group[key].shape}"
                        )
            current = layer.output_shape(current)
            shapes.append(current)
        return shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return self.shapes()[self.encoder_depth - 1] if self.encoder_depth else tuple(self.input_shape)

    def trainable_layers(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.trainable and layer.kind.has_params]

    def set_trainable(self, names: Iterable[str]) -> None:
        allowed = set(names)
        unknown = allowed - {layer.name for layer in self.layers}
        if unknown:
            raise KeyError(f"{self.name} has no layers {sorted(unknown)}")
        for layer in self.layers:
            layer.trainable = layer.name in allowed

    def freeze_encoder(self) -> None:
        for layer in self.layers[: self.encoder_depth]:
            layer.trainable = False

    def parameter_count(self, start: int = 0, stop: int | None = None) -> int:
        names = [layer.name for layer in self.layers[start:stop]]
        return self.params.count(names)

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    # -- execution -----------------------------------------------------
    def forward(
        self,
        x: np.ndarray,
        *,
        start: int = 0,
        stop: int | None = None,
        trace: bool = False,
    ) -> tuple[np.ndarray, Trace | None]:
        """Run layers ``start:stop`` on a batched input."""
        stop = len(self.layers) if stop is None else stop
        if stop < 0:
            stop += len(self.layers)
        record = Trace(start=start, stop=stop) if trace else None
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers[start:stop]:
            result, cache = self._forward_layer(layer, out)
            if record is not None:
                record.inputs.append(out)
                record.outputs.append(result)
                record.caches.append(cache)
            out = ops.check_finite(result, f"{self.name}.{layer.name}")
        return out, record

    def predict(self, x: np.ndarray, batch_size: int = 256, start: int = 0, stop: int | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        outputs = [
            self.forward(x[offset : offset + batch_size], start=start, stop=stop)[0]
            for offset in range(0, x.shape[0], batch_size)
        ]
        if not outputs:
            shape = self.shapes()[(len(self.layers) if stop is None else stop) - 1]
            return np.zeros((0, *shape))
        return np.concatenate(outputs, axis=0)

    def backward(
        self,
        record: Trace,
        grad_out: np.ndarray,
        *,
        extra: dict[str, np.ndarray] | None = None,
        need_input_grad: bool = False,
    ) -> tuple[dict[str, dict[str, np.ndarray]], np.ndarray | None]:
        """Back-propagate ``grad_out`` through the traced layers.

        ``extra`` adds gradients directly onto named layer outputs (used for
        activity penalties). Gradients are produced only for trainable layers;
        propagation stops once no trainable layer remains upstream.
        """
        extra = extra or {}
        grads: dict[str, dict[str, np.ndarray]] = {}
        grad = np.asarray(grad_out, dtype=np.float64)
        span = range(record.start, record.stop)
        trainable_upstream = [False] * (len(span) + 1)
        for offset, position in enumerate(span):
            layer = self.layers[position]
            trainable_upstream[offset + 1] = trainable_upstream[offset] or (
                layer.trainable and layer.kind.has_params
            )
        for offset in reversed(range(len(span))):
            layer = self.layers[record.start + offset]
            if layer.name in extra:
                grad = grad + extra[layer.name]
            grad, layer_grads = self._backward_layer(
                layer,
                grad,
                record.inputs[offset],
                record.outputs[offset],
                record.caches[offset],
            )
            if layer_grads is not None and layer.trainable:
                grads[layer.name] = layer_grads
            if not need_input_grad and not trainable_upstream[offset]:
                return grads, None
        return grads, grad

    def _forward_layer(self, layer: LayerSpec, x: np.ndarray) -> tuple[np.ndarray, Any]:
        kind = layer.kind
        group = self.params.tensors.get(layer.name, {})
        if kind is LayerKind.CONV1D:
            return ops.conv1d(x, group["weight"], group["bias"], layer.stride), None
        if kind is LayerKind.TCONV1D:
            return ops.tconv1d(x, group["weight"], group["bias"], layer.stride), None
        if kind is LayerKind.DENSE:
            return ops.dense(x, group["weight"], group["bias"]), None
        if kind is LayerKind.LAYER_NORM:
            return ops.layer_norm(x, group["weight"], group["bias"], layer.eps), None
        if kind is LayerKind.LEAKY_RELU:
            return ops.leaky_relu(x, layer.alpha), None
        if kind is LayerKind.ATTENTION_POOL:
            context, weights = ops.attention_pool(x, group["weight"], group["bias"])
            return context, weights
        if kind is LayerKind.GLOBAL_AVG_POOL:
            return ops.global_average_pool(x), None
        if kind is LayerKind.FLATTEN:
            return x.reshape(x.shape[0], -1), None
        if kind is LayerKind.UNFLATTEN:
            return x.reshape(x.shape[0], *layer.shape), None
        if kind is LayerKind.SOFTMAX:
            return ops.softmax(x), None
        raise ShapeError(f"unsupported layer kind {kind}")

    def _backward_layer(
        self,
        layer: LayerSpec,
        grad: np.ndarray,
        x: np.ndarray,
        out: np.ndarray,
        cache: Any,
    ) -> tuple[np.ndarray, dict[str, np.ndarray] | None]:
        kind = layer.kind
        group = self.params.tensors.get(layer.name, {})
        if kind is LayerKind.CONV1D:
            d_x, d_w, d_b = ops.conv1d_backward(grad, x, group["weight"], layer.stride)
            return d_x, {"weight": d_w, "bias": d_b}
        if kind is LayerKind.TCONV1D:
            d_x, d_w, d_b = ops.tconv1d_backward(grad, x, group["weight"], layer.stride)
            return d_x, {"weight": d_w, "bias": d_b}
        if kind is LayerKind.DENSE:
            d_x, d_w, d_b = ops.dense_backward(grad, x, group["weight"])
            return d_x, {"weight": d_w, "bias": d_b}
        if kind is LayerKind.LAYER_NORM:
            d_x, d_g, d_b = ops.layer_norm_backward(grad, x, group["weight"], layer.eps)
            return d_x, {"weight": d_g, "bias": d_b}
        if kind is LayerKind.LEAKY_RELU:
            return ops.leaky_relu_backward(grad, x, layer.alpha), None
        if kind is LayerKind.ATTENTION_POOL:
            d_x, d_w, d_b = ops.attention_pool_backward(grad, x, group["weight"], cache)
            return d_x, {"weight": d_w, "bias": d_b}
        if kind is LayerKind.GLOBAL_AVG_POOL:
            return ops.global_average_pool_backward(grad, x.shape[1]), None
        if kind in (LayerKind.FLATTEN, LayerKind.UNFLATTEN):
            return grad.reshape(x.shape), None
        if kind is LayerKind.SOFTMAX:
            return ops.softmax_backward(grad, out), None
        raise ShapeError(f"unsupported layer kind {kind}")
