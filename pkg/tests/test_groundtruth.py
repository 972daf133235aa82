import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppgnet.groundtruth import NoPeaksError, PeakTrain, detect_r_peaks, mean_hr_bpm, window_labels
from ppgnet.synth import HrProfile, synth_recording

ECG_HZ = 400.0


def impulse_train(period_s, duration_s, rate=ECG_HZ, offset_s=0.5):
    x = np.zeros(int(duration_s * rate))
    x[np.round(np.arange(offset_s, duration_s, period_s) * rate).astype(int)] = 1.0
    return x


def test_impulse_train_one_hz():
    x = np.zeros(4000)
    x[::400] = 1.0
    peaks = detect_r_peaks(x, ECG_HZ)
    assert len(peaks) == 10
    assert np.max(np.abs(peaks.indices - np.arange(10) * 400)) <= 2


def test_synthetic_ecg_constant_rate():
    rec = synth_recording("A", 60.0, HrProfile.constant(72.0))
    rr = np.diff(detect_r_peaks(rec.ecg, rec.ecg_rate_hz).indices) / ECG_HZ
    assert np.all(np.abs(rr - 60 / 72) <= 1 / ECG_HZ)


def test_white_noise_never_violates_refractory(rng):
    try:
        peaks = detect_r_peaks(rng.standard_normal(4000), ECG_HZ)
    except NoPeaksError:
        return
    assert np.all(np.diff(peaks.indices) >= 0.24 * ECG_HZ)


def test_detector_preconditions():
    with pytest.raises(ValueError):
        detect_r_peaks(np.zeros(1000), ECG_HZ)  # 2.5 s
    with pytest.raises(NoPeaksError):
        detect_r_peaks(np.zeros(2000), ECG_HZ)


@given(st.floats(1e-3, 1e4))
def test_labels_invariant_to_amplitude_scale(scale):
    x = impulse_train(0.8, 20.0)
    base = detect_r_peaks(x, ECG_HZ).indices
    assert np.array_equal(detect_r_peaks(scale * x, ECG_HZ).indices, base)


def test_peak_train_invariants():
    with pytest.raises(ValueError):
        PeakTrain(np.array([10, 5]), ECG_HZ)
    with pytest.raises(ValueError):
        PeakTrain(np.array([0, 50]), ECG_HZ)  # 0.125 s apart
    assert len(PeakTrain(np.array([0, 96]), ECG_HZ)) == 2


def _train(times):
    return PeakTrain(np.round(np.asarray(times) * ECG_HZ).astype(int), ECG_HZ)


def test_mean_hr_examples():
    assert mean_hr_bpm(_train(np.arange(0, 20, 0.5)), 2.0) == pytest.approx(120.0, abs=1e-9)
    assert mean_hr_bpm(_train(np.arange(0, 20, 1.0)), 2.0) == pytest.approx(60.0, abs=1e-9)
    # RR 0.5 then 1.0 inside the window -> 60 / 0.75
    assert mean_hr_bpm(_train([1.0, 1.5, 2.5]), 0.0) == pytest.approx(80.0, abs=1e-9)
    assert mean_hr_bpm(_train([1.0, 9.5]), 0.0) is None


def test_window_labels_nan_when_sparse():
    labels = window_labels(_train([0.5, 1.5, 30.0, 31.0]), 3)
    assert labels[0] == pytest.approx(60.0)
    assert np.isnan(labels[2])


def test_piecewise_constant_labels_near_planted_rate():
    profile = HrProfile((0.0, 60.0, 60.5, 120.0), (70.0, 70.0, 110.0, 110.0))
    rec = synth_recording("B", 120.0, profile, noise_sigma=0.1, artifact_level=0.3, seed=4)
    labels = window_labels(detect_r_peaks(rec.ecg, ECG_HZ), 57)
    starts = np.arange(57) * 2.0
    assert np.all(np.abs(labels[starts + 8 <= 60.0] - 70.0) <= 1.0)
    assert np.all(np.abs(labels[starts >= 60.5] - 110.0) <= 1.0)
