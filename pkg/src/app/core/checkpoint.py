"""Checkpoint container.

Layout::

    MAGIC (8 bytes) | header length (uint64, little-endian) | header (UTF-8 JSON) | payload

The payload holds every parameter tensor as contiguous little-endian float32,
in manifest order. Each manifest entry records name, dtype, shape, byte offset
(relative to the payload start) and byte length.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import struct
from typing import Any

import numpy as np

from app.core.errors import (
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ManifestError,
)
from app.core.signals import Standardizer
from app.nn.graph import LayerSpec, ModelGraph, ParamSet

logger = logging.getLogger(__name__)

MAGIC = b"SEMGCKPT"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = "<f4"
_LENGTH = struct.Struct("<Q")


@dataclass
class Checkpoint:
    graph: ModelGraph
    standardizer: Standardizer | None
    labels: list[str] = field(default_factory=list)
    seed: int = 0
    lam: float | None = None

    def save(self, path: Path | str) -> Path:
        return save_checkpoint(self.graph, self.standardizer, path, labels=self.labels, seed=self.seed, lam=self.lam)


def _standardizer_header(standardizer: Standardizer | None) -> dict[str, Any] | None:
    if standardizer is None:
        return None
    return {
        "mean": [float(value) for value in standardizer.mean],
        "std": [float(value) for value in standardizer.std],
        "fitted_on": sorted([int(subject), int(trial)] for subject, trial in standardizer.fitted_on),
        "description": standardizer.description,
    }


def _standardizer_from_header(raw: dict[str, Any] | None) -> Standardizer | None:
    if raw is None:
        return None
    return Standardizer(
        mean=np.asarray(raw["mean"], dtype=np.float64),
        std=np.asarray(raw["std"], dtype=np.float64),
        fitted_on=frozenset((int(subject), int(trial)) for subject, trial in raw["fitted_on"]),
        description=raw["description"],
    )


def encode_checkpoint(
    graph: ModelGraph,
    standardizer: Standardizer | None,
    *,
    labels: list[str] | None = None,
    seed: int = 0,
    lam: float | None = None,
) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for layer, name, array in graph.params.items():
        data = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes()
        manifest.append(
            {"name": f"{layer}.{name}", "dtype": "float32", "shape": list(array.shape), "offset": offset, "length": len(data)}
        )
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "model": {
            "name": graph.name,
            "input_shape": list(graph.input_shape),
            "encoder_depth": graph.encoder_depth,
            "latent_layer": graph.latent_layer,
            "layers": [layer.describe() for layer in graph.layers],
        },
        "labels": list(labels or []),
        "standardizer": _standardizer_header(standardizer),
        "seed": int(seed),
        "lambda": None if lam is None else float(lam),
        "payload_bytes": offset,
        "manifest": manifest,
    }
    text = json.dumps(header, indent=2, sort_keys=True).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(text)) + text + b"".join(chunks)


def save_checkpoint(
    graph: ModelGraph,
    standardizer: Standardizer | None,
    path: Path | str,
    *,
    labels: list[str] | None = None,
    seed: int = 0,
    lam: float | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(graph, standardizer, labels=labels, seed=seed, lam=lam))
    logger.info("Checkpoint disimpan: %s (%d parameter)", path, graph.parameter_count())
    return path


def read_header(blob: bytes) -> tuple[dict[str, Any], memoryview]:
    if len(blob) < len(MAGIC) + _LENGTH.size:
        raise CheckpointTruncatedError("checkpoint is shorter than its fixed preamble")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (length,) = _LENGTH.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _LENGTH.size
    if start + length > len(blob):
        raise CheckpointTruncatedError(f"header declares {length} bytes, only {len(blob) - start} present")
    try:
        header = json.loads(blob[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    return header, memoryview(blob)[start + length :]


def _check_manifest(manifest: list[dict[str, Any]], declared: int) -> None:
    expected = 0
    for entry in manifest:
        size = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if entry["dtype"] != "float32":
            raise ManifestError(f"manifest inconsistency: {entry['name']} has dtype {entry['dtype']}")
        if entry["offset"] != expected:
            raise ManifestError(
                f"manifest inconsistency: {entry['name']} at offset {entry['offset']}, expected {expected}"
            )
        if entry["length"] != size:
            raise ManifestError(f"manifest inconsistency: {entry['name']} length {entry['length']} != {size}")
        expected += size
    if expected != declared:
        raise ManifestError(f"manifest inconsistency: entries cover {expected} bytes, header declares {declared}")


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, payload = read_header(blob)
    try:
        manifest = header["manifest"]
        declared = int(header["payload_bytes"])
        model = header["model"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint header misses {exc}") from exc
    _check_manifest(manifest, declared)
    if len(payload) < declared:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, manifest needs {declared}")
    if len(payload) > declared:
        raise ManifestError(f"manifest inconsistency: {len(payload) - declared} unaccounted payload bytes")

    params = ParamSet()
    for entry in manifest:
        layer, _, name = entry["name"].rpartition(".")
        raw = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=entry["length"] // 4, offset=entry["offset"])
        params.tensors.setdefault(layer, {})[name] = raw.astype(np.float64).reshape(entry["shape"])
    layers = [LayerSpec.from_description(raw) for raw in model["layers"]]
    try:
        graph = ModelGraph(
            layers=layers,
            params=params,
            input_shape=tuple(model["input_shape"]),
            encoder_depth=int(model["encoder_depth"]),
            latent_layer=model["latent_layer"],
            name=model["name"],
        )
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"manifest inconsistency: tensors do not match the architecture ({exc})") from exc
    return Checkpoint(
        graph=graph,
        standardizer=_standardizer_from_header(header.get("standardizer")),
        labels=list(header.get("labels", [])),
        seed=int(header.get("seed", 0)),
        lam=header.get("lambda"),
    )
