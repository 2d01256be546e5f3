import dataclasses

import numpy as np
import pytest

from app.config import AdaptationConfig, TrainConfig
from app.core.adaptation import (
    apply_freeze_policy,
    calibration_subset,
    expand_head,
    finetune_user,
    forgetting_report,
    policy_layers,
    train_two_phase,
)
from app.core.baselines import gap_head_variant
from app.core.classifier import (
    OUTPUT_LAYER,
    build_classifier,
    evaluate,
    extract_latent,
    num_outputs,
    predict,
    predict_labels,
    train_classifier,
)
from app.core.csae import build_csae
from app.core.errors import CalibrationError, ConfigError, DataError, LeakageError, ShapeError
from app.core.experiments import classifier_config_for, csae_config_for, load_segments, prepare_fold, run_expansion
from app.core.signals import SegmentSet, plan_loso
from app.nn.objectives import logits_stop
from app.utils.checksums import param_checksum
from conftest import tiny_run
from data.enums import FreezePolicy, LayerKind

ADAPT = AdaptationConfig(
    finetune=TrainConfig(learning_rate=1e-3, max_epochs=3, batch_size=32, min_lr=1e-7),
    phase1=TrainConfig(learning_rate=1e-3, max_epochs=2, batch_size=64),
    phase2=TrainConfig(learning_rate=1e-4, max_epochs=2, batch_size=64, min_lr=1e-8),
)


@pytest.fixture(scope="module")
def trained(tiny_fold):
    run = tiny_run()
    encoder = build_csae(csae_config_for(run), seed=1)
    head = build_classifier(encoder, classifier_config_for(run), seed=1)
    train_classifier(head, tiny_fold.train, tiny_fold.val, classifier_config_for(run))
    return encoder, head


@pytest.fixture(scope="module")
def expansion_fold():
    segments = load_segments(tiny_run(num_classes="10"))
    return prepare_fold(segments, plan_loso([1, 2, 3])[0])


def _encoder_checksum(graph):
    return param_checksum(graph.params, [layer.name for layer in graph.layers[: graph.encoder_depth]])


class TestClassifier:
    def test_encoder_is_copied_and_frozen(self, trained):
        encoder, head = trained
        assert _encoder_checksum(head) == _encoder_checksum(encoder)
        assert not any(layer.trainable for layer in head.layers[: head.encoder_depth])
        assert head.layers[-1].kind is LayerKind.SOFTMAX
        assert head.layer("attention").kind is LayerKind.ATTENTION_POOL

    def test_probabilities(self, trained, tiny_fold):
        _, head = trained
        predictions = predict(head, tiny_fold.test.subset(np.arange(5)))
        for prediction in predictions:
            assert prediction.probs.sum() == pytest.approx(1.0, abs=1e-12)
            assert prediction.argmax == int(np.argmax(prediction.probs))

    def test_evaluation_report(self, trained, tiny_fold):
        _, head = trained
        report = evaluate(head, tiny_fold.test, fold_id=tiny_fold.target)
        assert report.num_classes == 6
        assert report.matrix.total == len(tiny_fold.test)

    @pytest.mark.parametrize("scale", [0.25, 3.0, 1e3])
    def test_labels_ignore_positive_logit_scale(self, trained, tiny_fold, scale):
        _, head = trained
        scaled = head.copy()
        for name in ("weight", "bias"):
            scaled.params.tensors[OUTPUT_LAYER][name] = head.params[OUTPUT_LAYER][name] * scale
        logits = head.predict(tiny_fold.test.segments, stop=logits_stop(head))
        np.testing.assert_allclose(
            scaled.predict(tiny_fold.test.segments, stop=logits_stop(scaled)), logits * scale, rtol=1e-9, atol=1e-9
        )
        np.testing.assert_array_equal(predict_labels(scaled, tiny_fold.test), predict_labels(head, tiny_fold.test))

    def test_out_of_range_labels(self, trained, tiny_fold):
        _, head = trained
        bad = tiny_fold.train.subset(np.arange(4))
        bad.labels = np.array([0, 1, 2, 9])
        with pytest.raises(DataError):
            train_classifier(head.copy(), bad, SegmentSet.empty(200), classifier_config_for(tiny_run()))

    def test_latent_shape_mismatch(self, trained):
        encoder, _ = trained
        with pytest.raises(ShapeError):
            extract_latent(encoder, SegmentSet.empty(window=100))

    def test_gap_variant(self, trained):
        encoder, _ = trained
        variant = gap_head_variant(encoder, classifier_config_for(tiny_run()), seed=1)
        assert variant.layer("gap").kind is LayerKind.GLOBAL_AVG_POOL
        assert variant.name == "classifier_gap"


class TestFreezePolicies:
    def test_policy_layers(self, trained):
        _, head = trained
        assert policy_layers(head, FreezePolicy.FINAL_DENSE_ONLY) == ["dense_1", "dense_2", OUTPUT_LAYER]
        assert policy_layers(head, FreezePolicy.NEW_OUTPUT_ONLY) == [OUTPUT_LAYER]
        assert policy_layers(head, FreezePolicy.FULL_HEAD) == ["norm", "head_conv", "attention", "dense_1", "dense_2", OUTPUT_LAYER]

    def test_apply_resets_optimizer(self, trained):
        _, head = trained
        clone = apply_freeze_policy(head.copy(), FreezePolicy.FULL_HEAD)
        assert clone.params.step == 0
        assert clone.trainable_layers() == policy_layers(head, FreezePolicy.FULL_HEAD)


class TestFinetune:
    def test_only_policy_layers_move(self, trained, tiny_fold):
        _, head = trained
        original = param_checksum(head.params)
        tuned, log = finetune_user(head, tiny_fold.calib, tiny_fold.calib_val, FreezePolicy.FINAL_DENSE_ONLY, ADAPT)
        assert param_checksum(head.params) == original
        assert len(log.epochs) >= 1
        frozen = [name for name in head.params.tensors if name not in policy_layers(head, FreezePolicy.FINAL_DENSE_ONLY)]
        assert param_checksum(tuned.params, frozen) == param_checksum(head.params, frozen)
        assert param_checksum(tuned.params, [OUTPUT_LAYER]) != param_checksum(head.params, [OUTPUT_LAYER])

    def test_calibration_must_come_from_trial_one(self, trained, tiny_fold):
        _, head = trained
        with pytest.raises(LeakageError):
            finetune_user(head, tiny_fold.calib_val, tiny_fold.calib_val, config=ADAPT)

    def test_calibration_must_come_from_the_target(self, trained, tiny_fold):
        _, head = trained
        with pytest.raises(LeakageError):
            finetune_user(head, tiny_fold.calib, tiny_fold.calib_val, config=ADAPT, target_subject=tiny_fold.target + 1)

    def test_empty_calibration(self, trained, tiny_fold):
        _, head = trained
        with pytest.raises(CalibrationError):
            finetune_user(head, SegmentSet.empty(200), tiny_fold.calib_val, config=ADAPT)

    def test_missing_class(self, trained, tiny_fold):
        _, head = trained
        partial = tiny_fold.calib.subset(tiny_fold.calib.labels != 3)
        with pytest.raises(CalibrationError):
            finetune_user(head, partial, tiny_fold.calib_val, config=ADAPT)

    def test_calibration_fraction(self, tiny_fold):
        subset = calibration_subset(tiny_fold.calib, 0.5)
        for label in range(6):
            total = int(np.sum(tiny_fold.calib.labels == label))
            assert int(np.sum(subset.labels == label)) == -(-total // 2)
        assert calibration_subset(tiny_fold.calib, 1.0) is tiny_fold.calib
        with pytest.raises(DataError):
            calibration_subset(tiny_fold.calib, 0.0)


class TestExpansion:
    def test_old_logits_are_preserved(self, trained):
        _, head = trained
        expanded = expand_head(head, 10, seed=4)
        assert num_outputs(expanded) == 10
        x = np.random.default_rng(0).normal(size=(6, *head.input_shape))
        old = head.predict(x, stop=logits_stop(head))
        new = expanded.predict(x, stop=logits_stop(expanded))
        np.testing.assert_allclose(new[:, :6], old, atol=1e-12, rtol=0)
        np.testing.assert_array_equal(expanded.params[OUTPUT_LAYER]["bias"][6:], np.zeros(4))

    def test_argmax_agrees_where_new_units_lose(self, trained, tiny_fold):
        _, head = trained
        expanded = expand_head(head, 10, seed=4)
        logits = expanded.predict(tiny_fold.test.segments, stop=logits_stop(expanded))
        old_wins = logits[:, :6].max(axis=1) > logits[:, 6:].max(axis=1)
        np.testing.assert_array_equal(
            predict_labels(expanded, tiny_fold.test)[old_wins], predict_labels(head, tiny_fold.test)[old_wins]
        )

    def test_must_grow(self, trained):
        _, head = trained
        with pytest.raises(ValueError):
            expand_head(head, 6)

    def test_two_phase_and_forgetting(self, trained, expansion_fold):
        _, head = trained
        fold = expansion_fold
        expanded = expand_head(head, 10, seed=4)
        encoder_before = _encoder_checksum(expanded)
        expanded, report = train_two_phase(expanded, fold.train, fold.val, ADAPT, evaluate_on=fold.test, fold_id=1)
        assert _encoder_checksum(expanded) == encoder_before
        assert report.phase1_metrics.num_classes == 10
        assert len(report.phase2_log.epochs) >= 1

        base_test = fold.test.subset(fold.test.labels < 6)
        forgetting = forgetting_report(head, expanded, base_test)
        assert [delta.class_id for delta in forgetting.deltas] == list(range(6))
        assert forgetting.confusion_rows.shape == (6, 10)
        assert forgetting.confusion_rows.sum() == len(base_test)

    def test_phase_one_moves_only_the_output_layer(self, trained, expansion_fold):
        _, head = trained
        expanded = expand_head(head, 10, seed=4)
        others = [name for name in expanded.params.tensors if name != OUTPUT_LAYER]
        assert {"norm", "head_conv", "dense_1", "dense_2"} <= set(others)
        before = param_checksum(expanded.params, others)
        output_before = param_checksum(expanded.params, [OUTPUT_LAYER])
        phase1_only = dataclasses.replace(ADAPT, phase2=dataclasses.replace(ADAPT.phase2, max_epochs=0))
        expanded, report = train_two_phase(expanded, expansion_fold.train, expansion_fold.val, phase1_only)
        assert param_checksum(expanded.params, others) == before
        assert param_checksum(expanded.params, [OUTPUT_LAYER]) != output_before
        assert report.phase2_log.epochs == []

    def test_phase_two_starts_from_the_phase_one_best(self, trained, expansion_fold):
        _, head = trained
        expanded = expand_head(head, 10, seed=4)
        _, report = train_two_phase(expanded, expansion_fold.train, expansion_fold.val, ADAPT)
        assert report.phase1_log.best_epoch >= 0
        assert report.phase2_log.initial_val_loss == report.phase1_log.best_val_loss

    def test_expansion_run_rejects_empty_data(self):
        with pytest.raises(DataError, match="empty"):
            run_expansion(tiny_run(num_classes="10"), SegmentSet.empty(200))

    def test_expansion_run_needs_ten_class_data(self, tiny_segments):
        with pytest.raises(ConfigError):
            run_expansion(tiny_run(num_classes="10"), tiny_segments)
