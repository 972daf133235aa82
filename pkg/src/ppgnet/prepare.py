"""Recording -> windowed dataset: upsample, segment, filter, label, normalize."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataio import LABEL_BOUNDS_BPM, WINDOW_RATE_HZ, Recording, WindowedDataset
from .dsp import design_bandpass, filter_zero_phase, normalize_per_subject, resample_linear, segment_windows
from .groundtruth import NoPeaksError, detect_r_peaks, window_labels

log = logging.getLogger(__name__)


@dataclass
class PrepareConfig:
    window_s: float = 8.0
    shift_s: float = 2.0
    low_hz: float = 0.5
    high_hz: float = 5.0
    prototype_order: int = 2
    normalization: str = "subject"  # "subject" | "window" | "none"


@dataclass
class PrepareStats:
    windows: int = 0
    kept: int = 0
    dropped_no_label: int = 0
    dropped_out_of_band: int = 0
    dropped_flat: int = 0  # subject signal without variance to normalize

    @property
    def dropped(self) -> int:
        return self.dropped_no_label + self.dropped_out_of_band + self.dropped_flat

    def __iadd__(self, other: "PrepareStats") -> "PrepareStats":
        self.windows += other.windows
        self.kept += other.kept
        self.dropped_no_label += other.dropped_no_label
        self.dropped_out_of_band += other.dropped_out_of_band
        self.dropped_flat += other.dropped_flat
        return self


def prepare_recording(
    recording: Recording, config: PrepareConfig | None = None
) -> tuple[WindowedDataset, PrepareStats]:
    cfg = config or PrepareConfig()
    ppg = resample_linear(recording.ppg, recording.ppg_rate_hz, WINDOW_RATE_HZ)
    windows = segment_windows(ppg, WINDOW_RATE_HZ, cfg.window_s, cfg.shift_s)
    stats = PrepareStats(windows=windows.shape[0])
    if windows.shape[0] == 0:
        log.warning("%s: %.1f s of PPG is shorter than one window", recording.subject_id, ppg.size / WINDOW_RATE_HZ)
        return WindowedDataset.empty(), stats

    windows = filter_zero_phase(
        windows, design_bandpass(cfg.low_hz, cfg.high_hz, cfg.prototype_order, WINDOW_RATE_HZ)
    )
    try:
        peaks = detect_r_peaks(recording.ecg, recording.ecg_rate_hz)
        labels = window_labels(peaks, windows.shape[0], cfg.shift_s, cfg.window_s)
    except NoPeaksError as exc:
        log.warning("%s: %s; dropping all windows", recording.subject_id, exc)
        labels = np.full(windows.shape[0], np.nan)

    no_label = np.isnan(labels)
    lo, hi = LABEL_BOUNDS_BPM
    out_of_band = ~no_label & ((labels < lo) | (labels > hi))
    keep = ~(no_label | out_of_band)
    stats.dropped_no_label = int(no_label.sum())
    stats.dropped_out_of_band = int(out_of_band.sum())
    stats.kept = int(keep.sum())
    if stats.dropped:
        log.info("%s: dropped %d of %d windows", recording.subject_id, stats.dropped, stats.windows)
    if stats.kept == 0:
        return WindowedDataset.empty(), stats

    kept = windows[keep]
    if cfg.normalization != "none":
        try:
            kept = normalize_per_subject(kept, cfg.normalization)
        except ValueError as exc:
            log.warning("%s: %s; dropping all windows", recording.subject_id, exc)
            stats.dropped_flat, stats.kept = stats.kept, 0
            return WindowedDataset.empty(), stats
    ds = WindowedDataset(kept, labels[keep], [recording.subject_id] * stats.kept, np.flatnonzero(keep))
    return ds, stats


def prepare_dataset(
    recordings: Iterable[Recording], config: PrepareConfig | None = None
) -> tuple[WindowedDataset, PrepareStats]:
    parts, total = [], PrepareStats()
    for rec in recordings:
        ds, stats = prepare_recording(rec, config)
        parts.append(ds)
        total += stats
    return WindowedDataset.concat(parts), total
