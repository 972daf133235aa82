"""R-peak detection on the reference ECG and per-window mean heart rate labels."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .dsp import design_bandpass, filter_zero_phase

log = logging.getLogger(__name__)

REFRACTORY_S = 0.24
INTEGRATION_S = 0.150
MIN_DURATION_S = 3.0


class NoPeaksError(ValueError):
    """No beat survived the adaptive threshold."""


@dataclass(frozen=True)
class PeakTrain:
    indices: np.ndarray
    rate_hz: float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if self.rate_hz <= 0:
            raise ValueError("rate must be positive")
        if idx.ndim != 1 or np.any(idx < 0):
            raise ValueError("peak indices must be a 1-D array of non-negative integers")
        if idx.size > 1:
            gaps = np.diff(idx)
            if np.any(gaps <= 0):
                raise ValueError("peak indices must be strictly increasing")
            if np.any(gaps / self.rate_hz < REFRACTORY_S - 1e-12):
                raise ValueError("peaks closer than the 0.24 s refractory bound")

    @property
    def times(self) -> np.ndarray:
        return self.indices / self.rate_hz

    def __len__(self) -> int:
        return int(self.indices.size)


def _integrated_energy(ecg: np.ndarray, rate_hz: float) -> np.ndarray:
    high = min(15.0, 0.45 * rate_hz)
    band = filter_zero_phase(ecg, design_bandpass(5.0, high, 2, rate_hz))
    slope = np.gradient(band) * rate_hz
    width = max(1, int(round(INTEGRATION_S * rate_hz)))
    # centered window keeps the energy peak aligned with the QRS
    return np.convolve(slope * slope, np.ones(width) / width, mode="same")


def detect_r_peaks(ecg, rate_hz: float) -> PeakTrain:
    """Simplified Pan-Tompkins detector.

    Bandpass 5-15 Hz (zero phase), differentiate, square, integrate over
    150 ms, then walk the local maxima of the integrated energy with the
    running signal/noise level threshold and a 240 ms refractory period. A
    search-back at half threshold recovers beats missed inside RR gaps
    longer than 1.66x the recent mean. Each accepted beat is placed on the
    largest raw ECG sample within 75 ms.
    """
    ecg = np.asarray(ecg, dtype=np.float64)
    if rate_hz <= 0:
        raise ValueError("rate must be positive")
    if ecg.ndim != 1 or ecg.size < MIN_DURATION_S * rate_hz:
        raise ValueError(f"need at least {MIN_DURATION_S} s of ECG")
    refractory = int(np.ceil(REFRACTORY_S * rate_hz))
    energy = _integrated_energy(ecg - np.median(ecg), rate_hz)

    # zero guard samples let maxima at the very edges count
    cand, _ = sps.find_peaks(np.pad(energy, 1), distance=refractory)
    cand = np.clip(cand - 1, 0, energy.size - 1)
    if cand.size == 0:
        raise NoPeaksError("no candidate peaks in integrated ECG energy")

    learn = energy[: int(2 * rate_hz)]
    spk = learn.max() / 3.0
    npk = learn.mean() / 2.0
    accepted: list[int] = []
    rejected: list[int] = []
    for c in cand:
        v = energy[c]
        threshold = npk + 0.25 * (spk - npk)
        if v > threshold and (not accepted or c - accepted[-1] >= refractory):
            if len(accepted) >= 3:
                rr = np.diff(accepted[-9:]).mean()
                if c - accepted[-1] > 1.66 * rr:
                    # search back for a missed beat between the last two acceptances
                    gap = [r for r in rejected if accepted[-1] + refractory <= r <= c - refractory]
                    gap = [r for r in gap if energy[r] > 0.5 * threshold]
                    if gap:
                        best = max(gap, key=lambda r: energy[r])
                        accepted.append(best)
                        spk = 0.25 * energy[best] + 0.75 * spk
            accepted.append(int(c))
            spk = 0.125 * v + 0.875 * spk
        else:
            rejected.append(int(c))
            npk = 0.125 * v + 0.875 * npk

    if not accepted:
        raise NoPeaksError("no beats above the adaptive threshold")

    half = max(1, int(round(0.075 * rate_hz)))
    refined = []
    for c in sorted(accepted):
        lo, hi = max(0, c - half), min(ecg.size, c + half + 1)
        refined.append(lo + int(np.argmax(ecg[lo:hi])))
    return PeakTrain(_enforce_refractory(refined, ecg, refractory), rate_hz)


def _enforce_refractory(peaks: list[int], ecg: np.ndarray, refractory: int) -> np.ndarray:
    kept: list[int] = []
    for p in peaks:
        if kept and p - kept[-1] < refractory:
            if ecg[p] > ecg[kept[-1]]:
                kept[-1] = p
            continue
        kept.append(p)
    return np.asarray(kept, dtype=np.int64)


def mean_hr_bpm(peaks: PeakTrain, window_start_s: float, window_len_s: float = 8.0) -> float | None:
    """60 / mean RR over intervals whose midpoint falls in ``[start, start + len)``.

    Returns ``None`` when fewer than two beats lie inside the window.
    """
    t = peaks.times
    end = window_start_s + window_len_s
    inside = (t >= window_start_s) & (t < end)
    if np.count_nonzero(inside) < 2:
        return None
    rr = np.diff(t)
    mid = t[:-1] + rr / 2.0
    sel = (mid >= window_start_s) & (mid < end)
    return float(60.0 / rr[sel].mean())


def window_labels(peaks: PeakTrain, n_windows: int, shift_s: float = 2.0, window_len_s: float = 8.0) -> np.ndarray:
    """Label for each sliding window; NaN where no label exists."""
    out = np.full(n_windows, np.nan)
    for i in range(n_windows):
        bpm = mean_hr_bpm(peaks, i * shift_s, window_len_s)
        if bpm is not None:
            out[i] = bpm
    return out
