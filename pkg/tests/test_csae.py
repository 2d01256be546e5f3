import dataclasses

import numpy as np
import pytest

from app.config import CsaeConfig, TrainConfig
from app.core.csae import (
    LATENT_LAYER,
    build_csae,
    mean_abs_latent,
    r2_score,
    reconstruct_r2,
    sweep_bottleneck,
    sweep_lambda,
    train_autoencoder,
)
from app.core.errors import ConfigError, DataError, ShapeError
from app.core.experiments import classifier_config_for, csae_config_for
from app.core.signals import SegmentSet
from app.utils.checksums import param_checksum
from conftest import tiny_run
from data.enums import LayerKind


class TestArchitecture:
    def test_default_lengths(self):
        graph = build_csae(CsaeConfig(), seed=0)
        assert graph.latent_shape == (45, 8)
        assert graph.output_shape == (1000, 2)
        assert graph.latent_layer == LATENT_LAYER
        final = graph.layers[-1]
        assert final.kind is LayerKind.TCONV1D
        assert final.stride == 1 and final.kernel_size == 86

    def test_encoder_is_the_leading_block(self):
        graph = build_csae(CsaeConfig(), seed=0)
        assert [layer.name for layer in graph.layers[: graph.encoder_depth]][-1] == LATENT_LAYER

    def test_small_window_round_trip(self):
        graph = build_csae(CsaeConfig(filters=(4, 8, 4), segment_length=200), seed=1)
        x = np.random.default_rng(0).normal(size=(3, 200, 2))
        assert graph.predict(x).shape == x.shape

    def test_too_short_segment(self):
        with pytest.raises(ShapeError):
            build_csae(CsaeConfig(segment_length=30), seed=0)

    def test_same_seed_same_weights(self):
        first, second = build_csae(CsaeConfig(), 5), build_csae(CsaeConfig(), 5)
        for (_, _, a), (_, _, b) in zip(first.params.items(), second.params.items()):
            np.testing.assert_array_equal(a, b)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            CsaeConfig(lam=-1.0)
        with pytest.raises(ConfigError):
            CsaeConfig(filters=(4, 8))


class TestR2:
    def test_perfect_and_mean_predictions(self):
        x = np.random.default_rng(0).normal(size=(5, 20, 2))
        assert r2_score(x, x) == 1.0
        assert r2_score(x, np.full_like(x, x.mean())) == pytest.approx(0.0, abs=1e-12)

    def test_zero_variance(self):
        with pytest.raises(DataError):
            r2_score(np.ones((2, 3)), np.ones((2, 3)))


class TestTraining:
    def test_training_improves_reconstruction(self, tiny_fold):
        config = dataclasses.replace(csae_config_for(tiny_run()), train=TrainConfig(max_epochs=8, batch_size=64, seed=1))
        graph = build_csae(config, seed=3)
        before = reconstruct_r2(graph, tiny_fold.train)
        _, log = train_autoencoder(graph, tiny_fold.train, tiny_fold.val, config)
        assert reconstruct_r2(graph, tiny_fold.train) > before
        assert log.val_losses[log.best_epoch] == log.best_val_loss

    def test_penalty_lowers_latent_activity(self, tiny_fold):
        base = dataclasses.replace(csae_config_for(tiny_run()), train=TrainConfig(max_epochs=10, batch_size=64, seed=1))
        activity = {}
        for lam in (0.0, 1e-1):
            config = dataclasses.replace(base, lam=lam)
            graph = build_csae(config, seed=3)
            train_autoencoder(graph, tiny_fold.train, tiny_fold.val, config)
            activity[lam] = mean_abs_latent(graph, tiny_fold.train)
        assert activity[1e-1] < activity[0.0]

    def test_labels_do_not_influence_training(self, tiny_fold):
        config = dataclasses.replace(csae_config_for(tiny_run()), train=TrainConfig(max_epochs=3, batch_size=64, seed=2))
        rng = np.random.default_rng(11)

        def relabelled(segments):
            return SegmentSet(segments.segments, rng.permutation(segments.labels), segments.subjects, segments.trials)

        runs = []
        for train, val in ((tiny_fold.train, tiny_fold.val), (relabelled(tiny_fold.train), relabelled(tiny_fold.val))):
            graph, log = train_autoencoder(build_csae(config, seed=5), train, val, config)
            runs.append((param_checksum(graph.params), log))
        (first_sum, first), (second_sum, second) = runs
        assert not np.array_equal(relabelled(tiny_fold.train).labels, tiny_fold.train.labels)
        assert first_sum == second_sum
        assert first.train_losses == second.train_losses
        assert first.val_losses == second.val_losses
        assert first.learning_rates == second.learning_rates
        assert (first.best_epoch, first.best_val_loss, first.stop_reason) == (
            second.best_epoch,
            second.best_val_loss,
            second.stop_reason,
        )


class TestSweeps:
    def test_lambda_sweep_needs_zero(self, tiny_fold):
        run = tiny_run()
        with pytest.raises(ConfigError):
            sweep_lambda([1e-6], tiny_fold.source_splits, csae_config_for(run), classifier_config_for(run))

    def test_lambda_sweep_rows_are_sorted(self, tiny_fold):
        run = tiny_run(**{"train.max_epochs": "1"})
        points = sweep_lambda([1e-6, 0.0], tiny_fold.source_splits, csae_config_for(run), classifier_config_for(run), seed=2)
        assert [point.lam for point in points] == [0.0, 1e-6]
        assert all(0.0 <= point.f1 <= 1.0 for point in points)

    def test_bottleneck_grid(self, tiny_fold):
        run = tiny_run(**{"train.max_epochs": "1"})
        points = sweep_bottleneck(
            [2, 3], tiny_fold.source_splits, csae_config_for(run), classifier_config_for(run), seed=2, lambdas=[0.0]
        )
        assert [(point.filters, point.lam) for point in points] == [(2, 0.0), (3, 0.0)]
