from datetime import datetime, timezone
import hashlib
import json

import pandas as pd
import pytest

from app.config import RunConfig
from app.core.csae import SweepPoint
from app.core.errors import DataError
from app.core.evaluation import MeanSE, cv_aggregate, fold_report
from app.core.reports import (
    BenchRow,
    render_report_dir,
    write_config,
    write_fig6,
    write_latency,
    write_run_manifest,
    write_table1,
    write_table2,
    write_table4,
)

LABELS = ["rest", "fist"]


def _summary(*predictions):
    return cv_aggregate([fold_report([0, 1, 1, 0], p, 2, fold_id=i) for i, p in enumerate(predictions)])


class TestTables:
    def test_table1_columns_and_empty_se(self, tmp_path):
        path = write_table1(tmp_path / "table1.csv", _summary([0, 1, 1, 0]), LABELS)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "class,f1_mean,f1_se"
        assert lines[1] == "rest,1,"
        assert lines[-1].startswith("average (class mean),")

    def test_table2_pairs(self, tmp_path):
        original = _summary([0, 1, 1, 0], [0, 0, 1, 0])
        tuned = _summary([0, 1, 1, 0], [0, 1, 1, 0])
        frame = pd.read_csv(write_table2(tmp_path / "table2.csv", original, tuned, LABELS))
        assert list(frame.columns) == ["class", "f1_original", "se_original", "f1_finetuned", "se_finetuned"]
        assert frame["f1_finetuned"].iloc[2] == 1.0
        assert frame["se_finetuned"].iloc[2] == 0.0

    def test_same_inputs_same_bytes(self, tmp_path):
        summary = _summary([0, 1, 0, 0], [1, 1, 1, 0])
        first = write_table1(tmp_path / "a.csv", summary, LABELS).read_bytes()
        second = write_table1(tmp_path / "b.csv", summary, LABELS).read_bytes()
        assert first == second

    def test_table4_keeps_latency_out(self, tmp_path):
        rows = [
            BenchRow("CSAE", MeanSE(0.9, 0.01), 1200, 800, 5000, 0.4),
            BenchRow("Classical + RF", MeanSE(0.8, None), 300, None, None, None, note="forest serialized size; not comparable"),
        ]
        frame = pd.read_csv(write_table4(tmp_path / "table4.csv", rows))
        assert "latency_ms" not in frame.columns
        assert pd.isna(frame["flops"].iloc[1])
        assert frame["note"].iloc[1] == "forest serialized size; not comparable"
        latency = pd.read_csv(write_latency(tmp_path / "latency.csv", rows))
        assert list(latency["method"]) == ["CSAE"]

    def test_fig6(self, tmp_path):
        points = [SweepPoint(8, 0.0, 0.9, 2.0, 0.95), SweepPoint(8, 1e-6, 0.91, 1.5, 0.94)]
        frame = pd.read_csv(write_fig6(tmp_path / "fig6.csv", points))
        assert list(frame.columns) == ["lambda", "f1", "mean_abs_z"]
        assert frame["lambda"].iloc[1] == 1e-6


class TestManifest:
    def test_checksums_and_seeds(self, tmp_path):
        run = RunConfig(seed=11)
        config = write_config(tmp_path, run)
        table = write_table1(tmp_path / "table1.csv", _summary([0, 1, 1, 0]), LABELS)
        path = write_run_manifest(tmp_path, run, "loso", datetime.now(timezone.utc), [config, table], {"fold_1": 5})
        manifest = json.loads(path.read_text(encoding="utf-8"))
        assert manifest["command"] == "loso"
        assert manifest["seed"] == 11
        assert manifest["seeds"] == {"fold_1": 5}
        assert manifest["files"]["table1.csv"] == hashlib.sha256(table.read_bytes()).hexdigest()
        assert manifest["wall_clock_s"] >= 0.0

    def test_config_lists_every_key(self, tmp_path):
        text = write_config(tmp_path, RunConfig()).read_text(encoding="utf-8")
        assert "csae.lambda = " in text
        assert "adaptation.phase2.learning_rate = 1e-05" in text


class TestRender:
    def test_renders_mean_and_se(self, tmp_path):
        write_table1(tmp_path / "table1.csv", _summary([0, 1, 1, 0], [0, 0, 1, 0]), LABELS)
        text = render_report_dir(tmp_path)
        assert "== table1.csv ==" in text
        assert "±" in text

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            render_report_dir(tmp_path)
