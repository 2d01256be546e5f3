from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable

from app.nn.graph import ParamSet


def compute_checksum(path: Path) -> str:
    """Hitung checksum SHA256 dari file lokal."""
    sha256 = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(8192), b""):
            sha256.update(chunk)
    return sha256.hexdigest()


def param_checksum(params: ParamSet, layers: Iterable[str] | None = None) -> str:
    """SHA256 over the raw bytes of the selected parameter tensors, in layer order."""
    selected = set(layers) if layers is not None else None
    sha256 = hashlib.sha256()
    for layer, name, array in params.items():
        if selected is not None and layer not in selected:
            continue
        sha256.update(f"{layer}.{name}:{array.shape}".encode())
        sha256.update(array.tobytes())
    return sha256.hexdigest()


def layer_checksums(params: ParamSet) -> dict[str, str]:
    return {layer: param_checksum(params, [layer]) for layer in params.tensors}
