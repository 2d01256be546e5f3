import numpy as np
import pandas as pd
import pytest

from app.core.errors import DataError, LeakageError
from app.core.signals import (
    CSV_COLUMNS,
    SegmentSet,
    TrialRecording,
    apply_standardizer,
    export_trials_csv,
    fit_standardizer,
    generate_synthetic_dataset,
    generate_synthetic_subject,
    load_dataset_dir,
    load_trials_csv,
    plan_loso,
    segment,
    segment_count,
    segment_recordings,
    select_roles,
    synthetic_profiles,
)
from data.enums import SplitRole


def _recording(subject=1, movement=0, trial=1, length=3000, seed=0):
    samples = np.random.default_rng(seed).normal(size=(length, 2))
    return TrialRecording(subject, movement, trial, samples)


def _offsets_oracle(length, window, stride):
    return [offset for offset in range(0, length) if offset % stride == 0 and offset + window <= length]


class TestSegmentation:
    def test_full_trial_gives_39_segments(self):
        assert segment_count(20000, 1000, 500) == 39

    def test_count_matches_offset_enumeration(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            window = int(rng.integers(1, 300))
            stride = int(rng.integers(1, 300))
            length = window + int(rng.integers(0, 2000))
            assert segment_count(length, window, stride) == len(_offsets_oracle(length, window, stride))

    def test_exact_window_gives_one_segment(self):
        assert segment_count(1000, 1000, 500) == 1

    def test_short_recording_is_an_error(self):
        with pytest.raises(DataError):
            segment_count(999, 1000, 500)

    def test_segments_carry_provenance(self):
        part = segment(_recording(subject=3, movement=2, trial=4, length=2500), 1000, 500)
        assert part.segments.shape == (4, 1000, 2)
        assert set(part.labels) == {2}
        assert part.provenance == {(3, 4)}

    def test_segment_contents(self):
        recording = _recording(length=2000)
        part = segment(recording, 1000, 500)
        np.testing.assert_array_equal(part.segments[1], recording.samples[500:1500])


class TestStandardizer:
    def test_train_is_zero_mean_unit_std(self):
        train = segment_recordings([_recording(seed=s, trial=t) for s, t in ((0, 1), (1, 2))], 500, 250)
        train = train.with_segments(train.segments * np.array([3.0, 0.2]) + np.array([5.0, -1.0]))
        scaled = apply_standardizer(fit_standardizer(train), train)
        flat = scaled.segments.reshape(-1, 2)
        assert np.all(np.abs(flat.mean(axis=0)) < 1e-9)
        assert np.all(np.abs(flat.std(axis=0) - 1.0) < 1e-9)

    def test_fit_on_evaluation_role_is_rejected(self):
        train = segment(_recording(), 1000, 500)
        with pytest.raises(LeakageError):
            fit_standardizer(train, role=SplitRole.TEST)

    def test_evaluation_overlap_is_rejected(self):
        train = segment(_recording(trial=1), 1000, 500)
        standardizer = fit_standardizer(train)
        with pytest.raises(LeakageError):
            apply_standardizer(standardizer, train, evaluation=True)
        other = segment(_recording(trial=6), 1000, 500)
        apply_standardizer(standardizer, other, evaluation=True)

    def test_unfitted_is_an_error(self):
        with pytest.raises(DataError):
            apply_standardizer(None, segment(_recording(), 1000, 500))

    def test_empty_fit_is_an_error(self):
        with pytest.raises(DataError):
            fit_standardizer(SegmentSet.empty())


class TestLosoPlan:
    def test_roles(self):
        plans = plan_loso([1, 2, 3])
        assert [plan.target_subject for plan in plans] == [1, 2, 3]
        plan = plans[1]
        assert plan.source_subjects == (1, 3)
        assert plan.role(1, 4) is SplitRole.TRAIN
        assert plan.role(3, 5) is SplitRole.VAL
        assert plan.role(3, 6) is SplitRole.TEST
        assert plan.role(2, 1) is SplitRole.CALIB
        assert plan.role(2, 2) is SplitRole.CALIB_VAL
        assert plan.pairs(SplitRole.ADAPT_TEST) == {(2, 3), (2, 4), (2, 5), (2, 6)}

    def test_target_never_reaches_source_roles(self):
        for plan in plan_loso([4, 5, 6, 7]):
            for role in (SplitRole.TRAIN, SplitRole.VAL, SplitRole.TEST):
                assert all(subject != plan.target_subject for subject, _ in plan.pairs(role))

    def test_needs_two_subjects(self):
        with pytest.raises(DataError):
            plan_loso([1])
        with pytest.raises(DataError):
            plan_loso([1, 1])

    def test_select_roles(self):
        recordings = [_recording(subject=s, trial=t, length=1000, seed=10 * s + t) for s in (1, 2) for t in range(1, 7)]
        segments = segment_recordings(recordings, 1000, 500)
        plan = plan_loso([1, 2])[0]
        train = select_roles(segments, plan, SplitRole.TRAIN)
        assert train.provenance == {(2, 1), (2, 2), (2, 3), (2, 4)}
        assert select_roles(segments, plan, SplitRole.CALIB, SplitRole.CALIB_VAL).provenance == {(1, 1), (1, 2)}


class TestCsv:
    def test_export_and_load(self, tmp_path):
        recordings = [_recording(movement=m, trial=t, length=50, seed=m * 10 + t) for m in (0, 1) for t in (1, 2)]
        path = export_trials_csv(recordings, tmp_path / "subject_01.csv")
        loaded = load_trials_csv(path)
        assert [item.key for item in loaded] == [item.key for item in recordings]
        np.testing.assert_allclose(loaded[0].samples, recordings[0].samples, rtol=1e-8)

    def _write(self, tmp_path, frame):
        path = tmp_path / "data.csv"
        frame.to_csv(path, index=False)
        return path

    def _frame(self):
        return pd.DataFrame(
            {"subject": 1, "movement": 0, "trial": 1, "sample_index": range(4), "ch1": 0.1, "ch2": -0.2}
        )

    def test_missing_column_is_named(self, tmp_path):
        path = self._write(tmp_path, self._frame().drop(columns=["trial"]))
        with pytest.raises(DataError, match="trial"):
            load_trials_csv(path)

    def test_three_channels_are_rejected(self, tmp_path):
        frame = self._frame()
        frame["ch3"] = 0.0
        with pytest.raises(DataError):
            load_trials_csv(self._write(tmp_path, frame))

    def test_non_numeric_value(self, tmp_path):
        frame = self._frame().astype({"ch1": object})
        frame.loc[2, "ch1"] = "abc"
        with pytest.raises(DataError, match="ch1"):
            load_trials_csv(self._write(tmp_path, frame))

    def test_trial_out_of_range(self, tmp_path):
        frame = self._frame()
        frame["trial"] = 7
        with pytest.raises(DataError):
            load_trials_csv(self._write(tmp_path, frame))

    def test_duplicate_recordings_across_files(self, tmp_path):
        self._frame().to_csv(tmp_path / "a.csv", index=False)
        self._frame().to_csv(tmp_path / "b.csv", index=False)
        with pytest.raises(DataError, match="duplicate"):
            load_dataset_dir(tmp_path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset_dir(tmp_path)

    def test_header_constant(self):
        assert CSV_COLUMNS == ("subject", "movement", "trial", "sample_index", "ch1", "ch2")


class TestSynthetic:
    def test_shapes_and_keys(self):
        recordings = generate_synthetic_subject(1, 6, 2, seed=0, duration_s=0.25)
        assert len(recordings) == 12
        assert recordings[0].samples.shape == (1000, 2)
        assert {item.movement_class for item in recordings} == set(range(6))

    def test_deterministic(self):
        first = generate_synthetic_dataset(2, 6, 1, seed=3, duration_s=0.1)
        second = generate_synthetic_dataset(2, 6, 1, seed=3, duration_s=0.1)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.samples, b.samples)

    def test_class_spectra_are_distinct(self):
        recordings = generate_synthetic_subject(1, 6, 1, seed=1, duration_s=1.0)
        peaks = []
        for item in recordings:
            spectrum = np.abs(np.fft.rfft(item.samples[:, 0]))
            peaks.append(np.fft.rfftfreq(item.samples.shape[0], 1 / 4000)[np.argmax(spectrum)])
        assert np.all(np.diff(peaks) > 0)

    def test_profiles_vary_between_subjects(self):
        profiles = synthetic_profiles(4, seed=0, gain_spread=0.6, shift_spread_hz=30.0)
        assert len({profile.gain for profile in profiles}) == 4
        assert all(abs(profile.freq_shift_hz) <= 30.0 for profile in profiles)

    @pytest.mark.parametrize("gain", [(2.0, 2.0), (0.5, 0.5), (2.0, 0.5)])
    def test_subject_gain_scales_the_recording(self, gain):
        unit = generate_synthetic_subject(2, 6, 1, seed=5, duration_s=0.1)
        scaled = generate_synthetic_subject(2, 6, 1, seed=5, subject_gain=gain, duration_s=0.1)
        for base, item in zip(unit, scaled):
            np.testing.assert_array_equal(item.samples, base.samples * np.asarray(gain))

    def test_gain_spread_zero_means_unit_gain(self):
        profiles = synthetic_profiles(3, seed=0, gain_spread=0.0, shift_spread_hz=10.0)
        assert all(profile.gain == (1.0, 1.0) for profile in profiles)

    def test_rejects_bad_class_count(self):
        with pytest.raises(ValueError):
            generate_synthetic_subject(1, 7, 1, seed=0)
