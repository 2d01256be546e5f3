"""Signal ingestion, segmentation, standardization and LOSO partitioning."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from app.core.errors import DataError, LeakageError
from app.nn.initializers import derive_seed
from data.enums import MovementClass, SplitRole

logger = logging.getLogger(__name__)

SAMPLING_RATE_HZ = 4000
CHANNELS = 2
WINDOW = 1000  # 250 ms
WINDOW_STRIDE = 500  # 125 ms
STD_FLOOR = 1e-8
MAX_TRIALS = 6

CSV_COLUMNS = ("subject", "movement", "trial", "sample_index", "ch1", "ch2")
_ID_COLUMNS = ("subject", "movement", "trial", "sample_index")
_CHANNEL_COLUMNS = ("ch1", "ch2")

SOURCE_TRIAL_ROLES = {1: SplitRole.TRAIN, 2: SplitRole.TRAIN, 3: SplitRole.TRAIN, 4: SplitRole.TRAIN, 5: SplitRole.VAL, 6: SplitRole.TEST}
TARGET_TRIAL_ROLES = {1: SplitRole.CALIB, 2: SplitRole.CALIB_VAL, 3: SplitRole.ADAPT_TEST, 4: SplitRole.ADAPT_TEST, 5: SplitRole.ADAPT_TEST, 6: SplitRole.ADAPT_TEST}


@dataclass
class TrialRecording:
    subject_id: int
    movement_class: int
    trial_index: int
    samples: np.ndarray
    sampling_rate: int = SAMPLING_RATE_HZ

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.subject_id < 1:
            raise DataError(f"subject id must be >= 1, got {self.subject_id}")
        if not 0 <= self.movement_class < len(MovementClass):
            raise DataError(f"movement class {self.movement_class} is outside the label map")
        if not 1 <= self.trial_index <= MAX_TRIALS:
            raise DataError(f"trial index must be in 1..{MAX_TRIALS}, got {self.trial_index}")
        if self.samples.ndim != 2 or self.samples.shape[1] != CHANNELS:
            raise DataError(f"recording must have shape (L, {CHANNELS}), got {self.samples.shape}")
        if self.samples.shape[0] == 0:
            raise DataError("recording is empty")

    @property
    def key(self) -> tuple[int, int, int]:
        return self.subject_id, self.movement_class, self.trial_index


@dataclass
class SegmentSet:
    segments: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    trials: np.ndarray

    def __post_init__(self) -> None:
        self.segments = np.asarray(self.segments, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.trials = np.asarray(self.trials, dtype=np.int64)
        count = self.segments.shape[0]
        if not (self.labels.shape == self.subjects.shape == self.trials.shape == (count,)):
            raise DataError("every segment needs a label and (subject, trial) provenance")

    def __len__(self) -> int:
        return int(self.segments.shape[0])

    @property
    def provenance(self) -> set[tuple[int, int]]:
        return set(zip(self.subjects.tolist(), self.trials.tolist()))

    def subset(self, mask: np.ndarray) -> "SegmentSet":
        return SegmentSet(self.segments[mask], self.labels[mask], self.subjects[mask], self.trials[mask])

    def with_segments(self, segments: np.ndarray) -> "SegmentSet":
        return SegmentSet(segments, self.labels.copy(), self.subjects.copy(), self.trials.copy())

    def classes(self) -> set[int]:
        return set(np.unique(self.labels).tolist())

    @classmethod
    def empty(cls, window: int = WINDOW, channels: int = CHANNELS) -> "SegmentSet":
        return cls(np.zeros((0, window, channels)), np.zeros(0), np.zeros(0), np.zeros(0))


@dataclass
class DataSplits:
    """Standardized train/val/test sets of one experiment."""

    train: SegmentSet
    val: SegmentSet
    test: SegmentSet


def merge_segment_sets(sets: Sequence[SegmentSet]) -> SegmentSet:
    sets = [item for item in sets if len(item)]
    if not sets:
        return SegmentSet.empty()
    return SegmentSet(
        np.concatenate([item.segments for item in sets]),
        np.concatenate([item.labels for item in sets]),
        np.concatenate([item.subjects for item in sets]),
        np.concatenate([item.trials for item in sets]),
    )


# -- ingestion ---------------------------------------------------------------

def load_trials_csv(path: Path | str) -> list[TrialRecording]:
    """Read recordings from ``subject,movement,trial,sample_index,ch1,ch2`` rows."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed CSV {path}: {exc}") from exc
    frame.columns = [str(column).strip() for column in frame.columns]

    channel_columns = [column for column in frame.columns if column.startswith("ch")]
    for column in CSV_COLUMNS:
        if column not in frame.columns:
            raise DataError(f"{path}: missing column '{column}' (expected header {','.join(CSV_COLUMNS)})")
    if len(channel_columns) != CHANNELS:
        raise DataError(f"{path}: expected exactly {CHANNELS} channels, found {channel_columns}")
    unexpected = [column for column in frame.columns if column not in CSV_COLUMNS]
    if unexpected:
        raise DataError(f"{path}: malformed header, unexpected columns {unexpected}")

    for column in CSV_COLUMNS:
        numeric = pd.to_numeric(frame[column], errors="coerce")
        bad = numeric.isna()
        if bad.any():
            row = int(bad.to_numpy().nonzero()[0][0])
            raise DataError(f"{path}: non-numeric value {frame[column].iloc[row]!r} in column '{column}' (data row {row + 1})")
        if column in _ID_COLUMNS and not np.all(np.mod(numeric.to_numpy(), 1) == 0):
            raise DataError(f"{path}: column '{column}' must hold integers")
        frame[column] = numeric

    recordings: list[TrialRecording] = []
    for (subject, movement, trial), group in frame.groupby(["subject", "movement", "trial"], sort=True):
        index = group["sample_index"].to_numpy()
        if np.any(np.diff(index) <= 0):
            raise DataError(
                f"{path}: out-of-order sample_index in subject={subject} movement={movement} trial={trial}"
            )
        recordings.append(
            TrialRecording(
                subject_id=int(subject),
                movement_class=int(movement),
                trial_index=int(trial),
                samples=group[list(_CHANNEL_COLUMNS)].to_numpy(dtype=np.float64),
            )
        )
    logger.info("Memuat %d rekaman dari %s", len(recordings), path)
    return recordings


def load_dataset_dir(data_dir: Path | str) -> list[TrialRecording]:
    data_dir = Path(data_dir)
    files = sorted(data_dir.glob("*.csv")) if data_dir.is_dir() else [data_dir]
    if not files or not all(file.is_file() for file in files):
        raise DataError(f"no CSV recordings found at {data_dir}")
    recordings: list[TrialRecording] = []
    for file in files:
        recordings.extend(load_trials_csv(file))
    keys = [recording.key for recording in recordings]
    if len(set(keys)) != len(keys):
        raise DataError(f"duplicate (subject, movement, trial) recordings under {data_dir}")
    return sorted(recordings, key=lambda recording: recording.key)


def export_trials_csv(recordings: Iterable[TrialRecording], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = []
    for recording in sorted(recordings, key=lambda item: item.key):
        length = recording.samples.shape[0]
        frames.append(
            pd.DataFrame(
                {
                    "subject": np.full(length, recording.subject_id),
                    "movement": np.full(length, recording.movement_class),
                    "trial": np.full(length, recording.trial_index),
                    "sample_index": np.arange(length),
                    "ch1": recording.samples[:, 0],
                    "ch2": recording.samples[:, 1],
                }
            )
        )
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=list(CSV_COLUMNS))
    frame.to_csv(path, index=False, float_format="%.9g")
    return path


# -- synthetic sEMG ------------------------------------------------------------

@dataclass(frozen=True)
class SubjectProfile:
    subject_id: int
    gain: tuple[float, float] = (1.0, 1.0)
    freq_shift_hz: float = 0.0


def class_center_frequencies(num_classes: int) -> np.ndarray:
    return np.linspace(50.0, 450.0, num_classes)


def class_channel_ratios(num_classes: int) -> np.ndarray:
    """ch1/ch2 RMS ratio per class; runs opposite to the frequency order."""
    return np.geomspace(2.0, 0.5, num_classes)


def _band_limited_noise(
    rng: np.random.Generator, length: int, center_hz: float, bandwidth_hz: float, rate: int
) -> np.ndarray:
    white = rng.standard_normal(length)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(length, d=1.0 / rate)
    spectrum *= np.exp(-0.5 * ((freqs - center_hz) / bandwidth_hz) ** 2)
    carrier = np.fft.irfft(spectrum, n=length)
    return carrier / np.sqrt(np.mean(carrier**2))


def generate_synthetic_subject(
    subject_id: int,
    num_classes: int,
    trials_per_class: int,
    seed: int,
    subject_gain: Sequence[float] = (1.0, 1.0),
    subject_freq_shift: float = 0.0,
    *,
    duration_s: float = 5.0,
    sampling_rate: int = SAMPLING_RATE_HZ,
    snr_db: float = 10.0,
    bandwidth_hz: float = 25.0,
) -> list[TrialRecording]:
    """Desk-scale stand-in for one subject's recordings.

    Class k is band-limited noise centred on its own frequency (50-450 Hz)
    with a class-specific ch1/ch2 amplitude ratio, plus white measurement
    noise at ``snr_db``. The subject gain scales each channel after noise is
    added; the frequency shift moves every class centre.
    """
    if num_classes not in (6, 10):
        raise ValueError(f"num_classes must be 6 or 10, got {num_classes}")
    if not 1 <= trials_per_class <= MAX_TRIALS:
        raise ValueError(f"trials_per_class must be in 1..{MAX_TRIALS}")
    length = int(round(duration_s * sampling_rate))
    gain = np.asarray(subject_gain, dtype=np.float64)
    centers = class_center_frequencies(num_classes) + subject_freq_shift
    ratios = class_channel_ratios(num_classes)
    noise_scale = 10.0 ** (-snr_db / 20.0)
    t = np.arange(length) / sampling_rate

    recordings = []
    for movement in range(num_classes):
        amplitudes = np.array([np.sqrt(ratios[movement]), 1.0 / np.sqrt(ratios[movement])])
        for trial in range(1, trials_per_class + 1):
            rng = np.random.default_rng(derive_seed(seed, subject_id, movement, trial))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            envelope = 1.0 + 0.1 * np.sin(2.0 * np.pi * 1.5 * t + phase)
            clean = np.stack(
                [
                    amplitudes[channel]
                    * envelope
                    * _band_limited_noise(rng, length, centers[movement], bandwidth_hz, sampling_rate)
                    for channel in range(CHANNELS)
                ],
                axis=1,
            )
            noisy = clean + noise_scale * amplitudes * rng.standard_normal((length, CHANNELS))
            recordings.append(
                TrialRecording(
                    subject_id=subject_id,
                    movement_class=movement,
                    trial_index=trial,
                    samples=noisy * gain,
                    sampling_rate=sampling_rate,
                )
            )
    return recordings


def synthetic_profiles(num_subjects: int, seed: int, gain_spread: float, shift_spread_hz: float) -> list[SubjectProfile]:
    """Per-subject gain and frequency shift emulating inter-subject variability."""
    profiles = []
    for subject_id in range(1, num_subjects + 1):
        rng = np.random.default_rng(derive_seed(seed, 7919, subject_id))
        gain = np.exp(rng.uniform(-gain_spread, gain_spread, size=CHANNELS))
        shift = rng.uniform(-shift_spread_hz, shift_spread_hz)
        profiles.append(SubjectProfile(subject_id, (float(gain[0]), float(gain[1])), float(shift)))
    return profiles


def generate_synthetic_dataset(
    num_subjects: int,
    num_classes: int,
    trials_per_class: int,
    seed: int,
    *,
    duration_s: float = 5.0,
    sampling_rate: int = SAMPLING_RATE_HZ,
    snr_db: float = 10.0,
    gain_spread: float = 0.6,
    shift_spread_hz: float = 30.0,
) -> list[TrialRecording]:
    recordings: list[TrialRecording] = []
    for profile in synthetic_profiles(num_subjects, seed, gain_spread, shift_spread_hz):
        logger.debug("Synthetic subject %s: gain=%s shift=%.1f Hz", profile.subject_id, profile.gain, profile.freq_shift_hz)
        recordings.extend(
            generate_synthetic_subject(
                profile.subject_id,
                num_classes,
                trials_per_class,
                seed,
                profile.gain,
                profile.freq_shift_hz,
                duration_s=duration_s,
                sampling_rate=sampling_rate,
                snr_db=snr_db,
            )
        )
    return recordings


# -- segmentation ---------------------------------------------------------------

def segment_count(length: int, window: int, stride: int) -> int:
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if length < window:
        raise DataError(f"recording of {length} samples is shorter than the {window}-sample window")
    return (length - window) // stride + 1


def segment(recording: TrialRecording, window: int = WINDOW, stride: int = WINDOW_STRIDE) -> SegmentSet:
    count = segment_count(recording.samples.shape[0], window, stride)
    offsets = np.arange(count) * stride
    segments = np.stack([recording.samples[offset : offset + window] for offset in offsets])
    return SegmentSet(
        segments,
        np.full(count, recording.movement_class),
        np.full(count, recording.subject_id),
        np.full(count, recording.trial_index),
    )


def segment_recordings(
    recordings: Sequence[TrialRecording], window: int = WINDOW, stride: int = WINDOW_STRIDE
) -> SegmentSet:
    ordered = sorted(recordings, key=lambda recording: recording.key)
    sets = []
    for recording in ordered:
        part = segment(recording, window, stride)
        if len(part) != 39 and window == WINDOW and stride == WINDOW_STRIDE:
            logger.warning(
                "Trial subject=%s movement=%s trial=%s yields %d segments",
                recording.subject_id,
                recording.movement_class,
                recording.trial_index,
                len(part),
            )
        sets.append(part)
    return merge_segment_sets(sets)


# -- standardization ----------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: frozenset[tuple[int, int]] = field(default_factory=frozenset)
    description: str = "train"

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)


def fit_standardizer(train: SegmentSet, role: SplitRole = SplitRole.TRAIN, description: str | None = None) -> Standardizer:
    if role is not SplitRole.TRAIN:
        raise LeakageError(f"standardizer may only be fitted on a training split, got {role.value}")
    if len(train) == 0:
        raise DataError("cannot fit a standardizer on an empty set")
    flat = train.segments.reshape(-1, train.segments.shape[-1])
    return Standardizer(
        mean=flat.mean(axis=0),
        std=flat.std(axis=0),
        fitted_on=frozenset(train.provenance),
        description=description or role.value,
    )


def apply_standardizer(
    standardizer: Standardizer | None, segments: SegmentSet, *, evaluation: bool = False
) -> SegmentSet:
    """Standardize per channel; ``evaluation=True`` rejects sets overlapping the fit data."""
    if standardizer is None:
        raise DataError("standardizer has not been fitted")
    if evaluation:
        overlap = segments.provenance & standardizer.fitted_on
        if overlap:
            raise LeakageError(f"evaluation set shares (subject, trial) pairs with the fit split: {sorted(overlap)[:5]}")
    return segments.with_segments((segments.segments - standardizer.mean) / standardizer.std)


# -- partitioning --------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    target_subject: int
    source_subjects: tuple[int, ...]
    roles: dict[tuple[int, int], SplitRole]

    def role(self, subject: int, trial: int) -> SplitRole:
        return self.roles.get((subject, trial), SplitRole.UNUSED)

    def pairs(self, role: SplitRole) -> set[tuple[int, int]]:
        return {pair for pair, assigned in self.roles.items() if assigned is role}


def plan_loso(subject_ids: Sequence[int], trials: int = MAX_TRIALS) -> list[SplitPlan]:
    subject_ids = list(subject_ids)
    if len(subject_ids) < 2:
        raise DataError("leave-one-subject-out needs at least two subjects")
    if len(set(subject_ids)) != len(subject_ids):
        raise DataError(f"duplicate subject ids: {subject_ids}")
    plans = []
    for target in subject_ids:
        roles: dict[tuple[int, int], SplitRole] = {}
        for subject in subject_ids:
            table = TARGET_TRIAL_ROLES if subject == target else SOURCE_TRIAL_ROLES
            for trial in range(1, trials + 1):
                roles[(subject, trial)] = table.get(trial, SplitRole.UNUSED)
        plans.append(
            SplitPlan(
                target_subject=target,
                source_subjects=tuple(subject for subject in subject_ids if subject != target),
                roles=roles,
            )
        )
    return plans


def select_roles(segments: SegmentSet, plan: SplitPlan, *roles: SplitRole) -> SegmentSet:
    wanted = set(roles)
    mask = np.array(
        [plan.role(subject, trial) in wanted for subject, trial in zip(segments.subjects.tolist(), segments.trials.tolist())],
        dtype=bool,
    )
    return segments.subset(mask)
