import numpy as np
import pytest

from app.config import ClassifierConfig, CsaeConfig
from app.core.classifier import build_classifier
from app.core.csae import build_csae
from app.core.errors import NumericalError
from app.nn import ops
from app.nn.gradcheck import gradient_check, layer_kind_cases
from app.nn.graph import LayerSpec
from app.nn.initializers import build_graph
from app.nn.objectives import ClassificationObjective, ReconstructionObjective, RegressionObjective
from data.enums import LayerKind

TOL = 1e-4
SMALL_CSAE = CsaeConfig(filters=(3, 4, 2), kernel_sizes=(5, 3, 3), strides=(2, 2, 1), segment_length=40)
SMALL_HEAD = ClassifierConfig(head_conv=(4, 2, 1), mlp_widths=(6, 5), num_classes=4)


@pytest.mark.parametrize("seed", range(20))
def test_every_layer_kind_matches_finite_differences(seed):
    for case in layer_kind_cases(seed):
        report = gradient_check(case.graph, case.loss, case.x, tol=TOL, seed=seed)
        assert report.passed, f"{case.name}: {report.per_tensor}"


def test_linear_graph_is_exact():
    graph = build_graph([LayerSpec(LayerKind.DENSE, "dense", 4, 3)], (4,), seed=1)
    x = np.random.default_rng(0).normal(size=(3, 4))
    target = np.random.default_rng(1).normal(size=(3, 3))
    report = gradient_check(graph, RegressionObjective(target), x)
    assert report.max_relative_error < 1e-8
    assert set(report.per_layer()) == {"dense", "input"}


@pytest.mark.parametrize("seed", range(20))
def test_csae_reconstruction_loss(seed):
    graph = build_csae(SMALL_CSAE, seed)
    x = np.random.default_rng(seed).normal(size=(2, 40, 2))
    report = gradient_check(graph, ReconstructionObjective(lam=1e-2), x, tol=TOL, max_probes=12, seed=seed)
    assert report.passed, report.per_tensor


@pytest.mark.parametrize("seed", range(20))
def test_classifier_cross_entropy(seed):
    head = build_classifier(build_csae(SMALL_CSAE, seed), SMALL_HEAD, seed)
    x = np.random.default_rng(seed).normal(size=(3, 40, 2))
    targets = ops.one_hot(np.array([0, 3, 1]), 4)
    report = gradient_check(head, ClassificationObjective(targets), x, tol=TOL, max_probes=12, seed=seed)
    assert report.passed, report.per_tensor
    # the encoder is frozen; it still passes the input gradient through
    assert "conv_1.weight" not in report.per_tensor
    assert "input" in report.per_tensor


def test_non_finite_loss_is_rejected():
    graph = build_graph([LayerSpec(LayerKind.DENSE, "dense", 2, 2)], (2,), seed=0)
    with pytest.raises(NumericalError):
        gradient_check(graph, RegressionObjective(np.zeros((1, 2))), np.array([[np.inf, 0.0]]))


def test_report_flags_a_wrong_gradient():
    case = layer_kind_cases(0)[2]

    def broken(graph, x, *, need_grad=True, need_input_grad=False):
        result = case.loss(graph, x, need_grad=need_grad, need_input_grad=need_input_grad)
        if result.grads:
            result.grads["dense"]["weight"] = result.grads["dense"]["weight"] * 2.0
        return result

    report = gradient_check(case.graph, broken, case.x, tol=TOL)
    assert not report.passed
    assert report.per_layer()["dense"] > TOL
