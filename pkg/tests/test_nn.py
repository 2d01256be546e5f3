import numpy as np
import pytest

from app.core.errors import ShapeError
from app.nn.graph import LayerSpec, ModelGraph, ParamSet
from app.nn.initializers import build_graph, derive_seed, he_normal_init
from app.nn.optim import EarlyStopping, ReduceLROnPlateau, adamw_step
from data.enums import LayerKind


def _single_weight(value: float) -> ParamSet:
    return ParamSet(tensors={"layer": {"weight": np.array([value])}})


class TestAdamW:
    def test_first_step(self):
        params = adamw_step(_single_weight(1.0), {"layer": {"weight": np.array([1.0])}}, lr=0.1, weight_decay=0.0)
        assert params.tensors["layer"]["weight"][0] == pytest.approx(0.9, abs=1e-6)
        assert params.step == 1

    def test_first_step_with_weight_decay(self):
        params = adamw_step(_single_weight(1.0), {"layer": {"weight": np.array([1.0])}}, lr=0.1, weight_decay=0.1)
        assert params.tensors["layer"]["weight"][0] == pytest.approx(0.89, abs=1e-6)

    def test_zero_gradient_is_identity(self):
        params = ParamSet(tensors={"layer": {"weight": np.array([0.3, -1.2]), "bias": np.array([2.0])}})
        grads = {"layer": {"weight": np.zeros(2), "bias": np.zeros(1)}}
        for _ in range(3):
            adamw_step(params, grads, lr=0.5, weight_decay=0.0)
        np.testing.assert_array_equal(params.tensors["layer"]["weight"], [0.3, -1.2])
        np.testing.assert_array_equal(params.tensors["layer"]["bias"], [2.0])

    def test_moments_mirror_parameter_shapes(self):
        params = ParamSet(tensors={"layer": {"weight": np.ones((3, 2))}})
        adamw_step(params, {"layer": {"weight": np.ones((3, 2))}}, lr=0.01)
        assert params.first_moment["layer"]["weight"].shape == (3, 2)
        assert params.second_moment["layer"]["weight"].shape == (3, 2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adamw_step(_single_weight(1.0), {"layer": {"weight": np.ones(2)}}, lr=0.1)


class TestSchedulers:
    def test_early_stopping_counts_patience(self):
        stopper = EarlyStopping(patience=2)
        assert stopper.step(1.0, 0)
        assert not stopper.step(1.5, 1)
        assert not stopper.should_stop
        assert not stopper.step(1.2, 2)
        assert stopper.should_stop
        assert stopper.best_epoch == 0

    def test_plateau_reduces_to_floor(self):
        scheduler = ReduceLROnPlateau(lr=1e-3, patience=1, factor=0.5, min_lr=3e-4)
        scheduler.step(1.0)
        assert scheduler.step(2.0) == pytest.approx(5e-4)
        assert scheduler.step(2.0) == pytest.approx(3e-4)
        assert scheduler.step(2.0) == pytest.approx(3e-4)


class TestInitializers:
    def test_he_normal_std(self):
        draws = he_normal_init((100_000,), fan_in=8, seed=0)
        assert abs(draws.std() / 0.5 - 1.0) < 0.02

    def test_he_normal_deterministic(self):
        np.testing.assert_array_equal(he_normal_init((3, 4), 12, 5), he_normal_init((3, 4), 12, 5))

    def test_he_normal_rejects_zero_fan_in(self):
        with pytest.raises(ValueError):
            he_normal_init((2,), 0, 0)

    def test_derive_seed_separates_streams(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(1, 3)
        assert derive_seed(1, 2, 3) != derive_seed(1, 23)


class TestModelGraph:
    def _graph(self) -> ModelGraph:
        layers = [
            LayerSpec(LayerKind.CONV1D, "conv", 2, 3, 3, 2),
            LayerSpec(LayerKind.LEAKY_RELU, "act", alpha=0.1),
            LayerSpec(LayerKind.FLATTEN, "flatten"),
            LayerSpec(LayerKind.DENSE, "dense", 12, 2),
        ]
        return build_graph(layers, (9, 2), seed=3, encoder_depth=2, latent_layer="act", name="toy")

    def test_shapes_and_counts(self):
        graph = self._graph()
        assert graph.shapes() == [(4, 3), (4, 3), (12,), (2,)]
        assert graph.latent_shape == (4, 3)
        assert graph.parameter_count() == 3 * 2 * 3 + 3 + 12 * 2 + 2
        assert graph.parameter_count(0, graph.encoder_depth) == 21

    def test_mismatched_parameters_are_rejected(self):
        graph = self._graph()
        graph.params.tensors["dense"]["weight"] = np.zeros((5, 2))
        with pytest.raises(ShapeError):
            graph.shapes()

    def test_duplicate_layer_names(self):
        with pytest.raises(ShapeError):
            build_graph(
                [LayerSpec(LayerKind.LEAKY_RELU, "act"), LayerSpec(LayerKind.LEAKY_RELU, "act")], (3,), seed=0
            )

    def test_partial_forward_composes(self):
        graph = self._graph()
        x = np.random.default_rng(0).normal(size=(4, 9, 2))
        full = graph.predict(x)
        latent = graph.predict(x, stop=2)
        np.testing.assert_allclose(graph.predict(latent, start=2), full)

    def test_copy_is_independent(self):
        graph = self._graph()
        clone = graph.copy()
        clone.params.tensors["dense"]["bias"] += 1.0
        clone.set_trainable(["dense"])
        assert not np.allclose(clone.params.tensors["dense"]["bias"], graph.params.tensors["dense"]["bias"])
        assert graph.trainable_layers() == ["conv", "dense"]
        assert clone.trainable_layers() == ["dense"]

    def test_freeze_encoder(self):
        graph = self._graph()
        graph.freeze_encoder()
        assert graph.trainable_layers() == ["dense"]

    def test_forward_is_deterministic(self):
        x = np.random.default_rng(2).normal(size=(3, 9, 2))
        np.testing.assert_array_equal(self._graph().predict(x), self._graph().predict(x))
