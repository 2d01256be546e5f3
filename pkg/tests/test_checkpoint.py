import json

import numpy as np
import pytest

from app.config import CsaeConfig
from app.core.checkpoint import MAGIC, encode_checkpoint, load_checkpoint, read_header, save_checkpoint
from app.core.classifier import build_classifier
from app.core.csae import build_csae
from app.core.errors import (
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ManifestError,
)
from app.core.experiments import classifier_config_for
from app.core.signals import Standardizer
from conftest import tiny_run

STANDARDIZER = Standardizer(mean=[0.1, -0.2], std=[1.5, 0.7], fitted_on=frozenset({(2, 1), (3, 4)}))


@pytest.fixture(scope="module")
def graph():
    encoder = build_csae(CsaeConfig(filters=(4, 8, 4), segment_length=200), seed=1)
    return build_classifier(encoder, classifier_config_for(tiny_run()), seed=2)


def _rewrite(blob: bytes, mutate) -> bytes:
    """Re-encode ``blob`` after ``mutate`` edits its JSON header in place."""
    header, payload = read_header(blob)
    mutate(header)
    text = json.dumps(header).encode("utf-8")
    return MAGIC + len(text).to_bytes(8, "little") + text + bytes(payload)


def _load(tmp_path, blob):
    path = tmp_path / "model.ckpt"
    path.write_bytes(blob)
    return load_checkpoint(path)


class TestRoundTrip:
    def test_forward_outputs_survive(self, graph, tmp_path):
        path = save_checkpoint(graph, STANDARDIZER, tmp_path / "model.ckpt", labels=["a", "b"], seed=9, lam=1e-6)
        loaded = load_checkpoint(path)
        x = np.random.default_rng(0).normal(size=(4, 200, 2))
        np.testing.assert_allclose(loaded.graph.predict(x), graph.predict(x), rtol=1e-5, atol=1e-7)
        assert loaded.graph.encoder_depth == graph.encoder_depth
        assert loaded.graph.latent_layer == graph.latent_layer
        assert [layer.trainable for layer in loaded.graph.layers] == [layer.trainable for layer in graph.layers]
        assert loaded.labels == ["a", "b"]
        assert loaded.seed == 9 and loaded.lam == 1e-6

    def test_standardizer_survives(self, graph, tmp_path):
        loaded = _load(tmp_path, encode_checkpoint(graph, STANDARDIZER))
        np.testing.assert_array_equal(loaded.standardizer.mean, STANDARDIZER.mean)
        np.testing.assert_array_equal(loaded.standardizer.std, STANDARDIZER.std)
        assert loaded.standardizer.fitted_on == STANDARDIZER.fitted_on

    def test_without_standardizer(self, graph, tmp_path):
        assert _load(tmp_path, encode_checkpoint(graph, None)).standardizer is None

    def test_encoding_is_deterministic(self, graph):
        assert encode_checkpoint(graph, STANDARDIZER, seed=1) == encode_checkpoint(graph, STANDARDIZER, seed=1)


class TestCorruption:
    def test_bad_magic(self, graph, tmp_path):
        blob = encode_checkpoint(graph, None)
        with pytest.raises(CheckpointError, match="magic"):
            _load(tmp_path, b"X" + blob[1:])

    def test_unknown_version(self, graph, tmp_path):
        blob = _rewrite(encode_checkpoint(graph, None), lambda header: header.update(format_version=99))
        with pytest.raises(CheckpointVersionError):
            _load(tmp_path, blob)

    def test_truncated_payload(self, graph, tmp_path):
        with pytest.raises(CheckpointTruncatedError):
            _load(tmp_path, encode_checkpoint(graph, None)[:-1])

    def test_truncated_preamble(self, tmp_path):
        with pytest.raises(CheckpointTruncatedError):
            _load(tmp_path, MAGIC[:4])

    def test_trailing_bytes(self, graph, tmp_path):
        with pytest.raises(ManifestError):
            _load(tmp_path, encode_checkpoint(graph, None) + b"\x00\x00\x00\x00")

    def test_manifest_offset_gap(self, graph, tmp_path):
        def shift(header):
            header["manifest"][1]["offset"] += 4

        with pytest.raises(ManifestError, match="manifest inconsistency"):
            _load(tmp_path, _rewrite(encode_checkpoint(graph, None), shift))

    def test_tensor_shape_disagrees_with_layers(self, graph, tmp_path):
        def transpose(header):
            entry = next(item for item in header["manifest"] if item["name"] == "dense_1.weight")
            entry["shape"] = list(reversed(entry["shape"]))

        with pytest.raises(ManifestError):
            _load(tmp_path, _rewrite(encode_checkpoint(graph, None), transpose))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
