from __future__ import annotations

from pathlib import Path

import pytest

from app.config import RunConfig, build_run_config
from app.core.experiments import FoldData, fold_plans, load_segments, prepare_fold
from app.core.signals import SegmentSet

# Small enough for the whole suite to run in seconds; shapes stay valid for the CSAE.
TINY_OVERRIDES = {
    "synthetic": "true",
    "window": "200",
    "window_stride": "100",
    "synthetic_data.num_subjects": "3",
    "synthetic_data.duration_s": "0.3",
    "train.max_epochs": "3",
    "train.batch_size": "64",
    "train.early_stop_patience": "3",
    "csae.filters": "4,8,4",
    "classifier.head_conv": "8,3,1",
    "classifier.mlp_widths": "16,8",
    "forest.num_trees": "5",
    "forest.max_depth": "4",
    "fcae.hidden_widths": "32",
    "fcae.latent_width": "8",
    "lambdas": "0,1e-6",
    "folds": "1",
    "seed": "7",
}


def tiny_run(tmp_path: Path | None = None, **extra: str) -> RunConfig:
    overrides = dict(TINY_OVERRIDES)
    if tmp_path is not None:
        overrides["output_dir"] = str(tmp_path)
    overrides.update(extra)
    return build_run_config(overrides)


@pytest.fixture
def run_config(tmp_path: Path) -> RunConfig:
    return tiny_run(tmp_path / "out")


@pytest.fixture(scope="session")
def tiny_segments() -> SegmentSet:
    return load_segments(tiny_run())


def tiny_argv(tmp_path: Path) -> list[str]:
    """CLI flags matching TINY_OVERRIDES, through a config file."""
    config = tmp_path / "tiny.cfg"
    config.write_text(
        "\n".join(f"{key} = {value}" for key, value in TINY_OVERRIDES.items() if key != "synthetic") + "\n",
        encoding="utf-8",
    )
    return ["--synthetic", "--config", str(config), "--out", str(tmp_path / "out")]


@pytest.fixture(scope="session")
def tiny_fold(tiny_segments: SegmentSet) -> FoldData:
    run = tiny_run()
    return prepare_fold(tiny_segments, fold_plans(run, tiny_segments)[0])
