import numpy as np

from ppgnet.dataio import Recording
from ppgnet.prepare import PrepareConfig, prepare_dataset, prepare_recording
from ppgnet.synth import HrProfile, synth_recording


def test_prepared_windows_are_labelled_and_normalized(small_dataset):
    assert small_dataset.samples.shape[1] == 1000
    for sid in small_dataset.subjects:
        part = small_dataset.for_subjects([sid])
        assert len(part) == 17
        assert abs(part.samples.mean()) < 1e-9
        assert abs(part.samples.std() - 1.0) < 1e-9
        assert np.array_equal(part.window_index, np.arange(17))


def test_constant_rate_labels():
    rec = synth_recording("K", 60.0, HrProfile.constant(90.0))
    ds, stats = prepare_recording(rec)
    assert stats.windows == stats.kept == 27
    assert np.all(np.abs(ds.labels - 90.0) <= 0.5)


def test_short_recording_gives_no_windows():
    rec = synth_recording("T", 8.5, HrProfile.constant(70.0))
    ds, stats = prepare_recording(rec, PrepareConfig(window_s=9.0))
    assert len(ds) == 0 and stats.windows == 0


def test_flat_ppg_subject_is_dropped():
    rec = synth_recording("F", 30.0, HrProfile.constant(70.0))
    flat = Recording("G", np.full(rec.ppg.size, 2.0), rec.ppg_rate_hz, rec.ecg, rec.ecg_rate_hz)
    ds, stats = prepare_dataset([flat, rec])
    assert stats.dropped_flat == 12
    assert ds.subjects == ["F"]
    assert len(ds) == 12


def test_ecg_without_beats_drops_everything():
    rec = synth_recording("Z", 30.0, HrProfile.constant(70.0))
    silent = Recording("Z", rec.ppg, rec.ppg_rate_hz, np.zeros(rec.ecg.size), rec.ecg_rate_hz)
    ds, stats = prepare_recording(silent)
    assert len(ds) == 0 and stats.dropped_no_label == 12
