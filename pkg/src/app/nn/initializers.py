from __future__ import annotations

from typing import Sequence

import numpy as np

from app.nn.graph import LayerSpec, ModelGraph, ParamSet
from data.enums import LayerKind


def derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for (seed, keys...) so layers and folds never share a stream."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def he_normal_init(shape: Sequence[int], fan_in: int, seed: int) -> np.ndarray:
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape))


def init_layer(layer: LayerSpec, seed: int) -> dict[str, np.ndarray]:
    shapes = layer.param_shapes()
    if not shapes:
        return {}
    if layer.kind is LayerKind.LAYER_NORM:
        return {"weight": np.ones(shapes["weight"]), "bias": np.zeros(shapes["bias"])}
    return {
        "weight": he_normal_init(shapes["weight"], layer.fan_in(), seed),
        "bias": np.zeros(shapes["bias"]),
    }


def build_graph(
    layers: list[LayerSpec],
    input_shape: tuple[int, ...],
    seed: int,
    *,
    encoder_depth: int = 0,
    latent_layer: str | None = None,
    name: str = "model",
) -> ModelGraph:
    params = ParamSet()
    for position, layer in enumerate(layers):
        group = init_layer(layer, derive_seed(seed, position))
        if group:
            params.tensors[layer.name] = group
    return ModelGraph(
        layers=layers,
        params=params,
        input_shape=tuple(input_shape),
        encoder_depth=encoder_depth,
        latent_layer=latent_layer,
        name=name,
    )
