"""CSV report writers and the self-describing run manifest."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from app.config import RunConfig
from app.core.checkpoint import FORMAT_VERSION
from app.core.csae import SweepPoint
from app.core.errors import DataError
from app.core.evaluation import CvSummary, MeanSE, cv_summary_rows, format_mean_se
from app.utils.checksums import compute_checksum

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def ensure_output_dir(path: Path | str) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {path} is not writable: {exc}") from exc
    return path


def _write(frame: pd.DataFrame, path: Path) -> Path:
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    logger.info("Wrote %s (%d rows)", path, len(frame))
    return path


def _se(value: MeanSE) -> float:
    return math.nan if value.se is None else value.se


def write_table1(path: Path, summary: CvSummary, labels: Sequence[str]) -> Path:
    rows = cv_summary_rows(summary, labels)
    return _write(
        pd.DataFrame(
            {
                "class": [name for name, _ in rows],
                "f1_mean": [value.mean for _, value in rows],
                "f1_se": [_se(value) for _, value in rows],
            }
        ),
        Path(path),
    )


def _paired(path: Path, first: CvSummary, second: CvSummary, names: tuple[str, str], labels: Sequence[str]) -> Path:
    left = cv_summary_rows(first, labels)
    right = cv_summary_rows(second, labels)
    return _write(
        pd.DataFrame(
            {
                "class": [name for name, _ in left],
                f"f1_{names[0]}": [value.mean for _, value in left],
                f"se_{names[0]}": [_se(value) for _, value in left],
                f"f1_{names[1]}": [value.mean for _, value in right],
                f"se_{names[1]}": [_se(value) for _, value in right],
            }
        ),
        Path(path),
    )


def write_table2(path: Path, original: CvSummary, finetuned: CvSummary, labels: Sequence[str]) -> Path:
    return _paired(path, original, finetuned, ("original", "finetuned"), labels)


def write_table3(path: Path, phase1: CvSummary, phase2: CvSummary, labels: Sequence[str]) -> Path:
    return _paired(path, phase1, phase2, ("phase1", "phase2"), labels)


def write_fig6(path: Path, points: Sequence[SweepPoint]) -> Path:
    return _write(
        pd.DataFrame(
            {
                "lambda": [point.lam for point in points],
                "f1": [point.f1 for point in points],
                "mean_abs_z": [point.mean_abs_z for point in points],
            }
        ),
        Path(path),
    )


def write_fig6_grid(path: Path, points: Sequence[SweepPoint]) -> Path:
    return _write(
        pd.DataFrame(
            {
                "filters": [point.filters for point in points],
                "lambda": [point.lam for point in points],
                "f1": [point.f1 for point in points],
            }
        ),
        Path(path),
    )


def write_fig7(path: Path, labels: Sequence[str], before: Sequence[float], after: Sequence[float]) -> Path:
    return _write(pd.DataFrame({"class": list(labels), "f1_before": list(before), "f1_after": list(after)}), Path(path))


def write_confusion_rows(path: Path, row_labels: Sequence[str], column_labels: Sequence[str], counts: np.ndarray) -> Path:
    frame = pd.DataFrame(np.asarray(counts, dtype=np.int64), columns=list(column_labels))
    frame.insert(0, "class", list(row_labels))
    return _write(frame, Path(path))


@dataclass
class BenchRow:
    method: str
    f1: MeanSE
    static_bytes: int | None
    runtime_bytes: int | None
    flops: int | None
    latency_ms: float | None
    note: str = ""


def write_table4(path: Path, rows: Sequence[BenchRow]) -> Path:
    return _write(
        pd.DataFrame(
            {
                "method": [row.method for row in rows],
                "f1_mean": [row.f1.mean for row in rows],
                "f1_se": [_se(row.f1) for row in rows],
                "static_bytes": pd.array([row.static_bytes for row in rows], dtype="Int64"),
                "runtime_bytes": pd.array([row.runtime_bytes for row in rows], dtype="Int64"),
                "flops": pd.array([row.flops for row in rows], dtype="Int64"),
                "note": [row.note for row in rows],
            }
        ),
        Path(path),
    )


def write_latency(path: Path, rows: Sequence[BenchRow]) -> Path:
    """Single-sample forward latency per method (wall-clock, varies between runs)."""
    measured = [row for row in rows if row.latency_ms is not None]
    return _write(
        pd.DataFrame({"method": [row.method for row in measured], "latency_ms": [row.latency_ms for row in measured]}),
        Path(path),
    )


def write_gradcheck(path: Path, rows: Sequence[tuple[str, str, float]]) -> Path:
    return _write(
        pd.DataFrame(
            {
                "case": [case for case, _, _ in rows],
                "tensor": [tensor for _, tensor, _ in rows],
                "max_relative_error": [error for _, _, error in rows],
            }
        ),
        Path(path),
    )


def write_fold_scores(path: Path, fold_ids: Sequence[int], columns: dict[str, Sequence[float]]) -> Path:
    frame = pd.DataFrame({"fold": list(fold_ids)})
    for name, values in columns.items():
        frame[name] = list(values)
    return _write(frame, Path(path))


def write_config(out_dir: Path, run: RunConfig) -> Path:
    path = Path(out_dir) / "config.txt"
    try:
        path.write_text("\n".join(run.to_lines()) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return path


def _relative(out_dir: Path, file: Path) -> str:
    try:
        return file.resolve().relative_to(out_dir.resolve()).as_posix()
    except ValueError:
        return file.name


def write_run_manifest(
    out_dir: Path,
    run: RunConfig,
    command: str,
    started_at: datetime,
    files: Iterable[Path],
    seeds: dict[str, int] | None = None,
) -> Path:
    """manifest.json: command, seeds, format versions, wall-clock and output checksums."""
    out_dir = Path(out_dir)
    finished_at = datetime.now(timezone.utc)
    manifest = {
        "command": command,
        "seed": run.seed,
        "seeds": dict(seeds or {}),
        "checkpoint_format_version": FORMAT_VERSION,
        "config": "config.txt",
        "started_at": started_at.isoformat(),
        "finished_at": finished_at.isoformat(),
        "wall_clock_s": (finished_at - started_at).total_seconds(),
        "files": {_relative(out_dir, Path(file)): compute_checksum(Path(file)) for file in files},
    }
    path = out_dir / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return path


_PAIRS = {
    "table1.csv": [("F1", "f1_mean", "f1_se")],
    "table2.csv": [("original", "f1_original", "se_original"), ("fine-tuned", "f1_finetuned", "se_finetuned")],
    "table3.csv": [("phase I", "f1_phase1", "se_phase1"), ("phase II", "f1_phase2", "se_phase2")],
}


def _mean_se(mean: float, se: float) -> MeanSE:
    return MeanSE(float(mean), None if pd.isna(se) else float(se))


def render_report_dir(out_dir: Path | str) -> str:
    """Render every table CSV found in ``out_dir`` as "mean ± SE" text."""
    out_dir = Path(out_dir)
    sections = []
    for name, pairs in _PAIRS.items():
        path = out_dir / name
        if not path.is_file():
            continue
        frame = pd.read_csv(path)
        table = pd.DataFrame({"class": frame["class"]})
        for title, mean_column, se_column in pairs:
            table[title] = [format_mean_se(_mean_se(m, s)) for m, s in zip(frame[mean_column], frame[se_column])]
        sections.append(f"== {name} ==\n{table.to_string(index=False)}")
    for name in ("fig6.csv", "fig6_grid.csv", "fig7.csv", "table4.csv", "folds.csv"):
        path = out_dir / name
        if path.is_file():
            sections.append(f"== {name} ==\n{pd.read_csv(path).to_string(index=False)}")
    if not sections:
        raise DataError(f"no reports found in {out_dir}")
    return "\n\n".join(sections)

