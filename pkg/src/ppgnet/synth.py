"""Paired synthetic PPG/ECG recordings with a planted heart-rate profile."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Recording
from .dsp import design_bandpass, filter_zero_phase

PPG_RATE_HZ = 50.0
ECG_RATE_HZ = 400.0
ECG_PULSE_SIGMA_S = 0.010
BPM_BOUNDS = (40.0, 180.0)

# generator constants, not physiological claims
SECOND_HARMONIC = 0.3
SECOND_HARMONIC_PHASE = 0.5
WANDER_AMPLITUDE = 0.2
WANDER_HZ = 0.1
ARTIFACT_BAND_HZ = (0.5, 3.0)


@dataclass(frozen=True)
class HrProfile:
    """Piecewise-linear heart rate; held constant outside the breakpoints."""

    times_s: tuple[float, ...]
    bpm: tuple[float, ...]

    def __post_init__(self):
        t = np.asarray(self.times_s, dtype=float)
        b = np.asarray(self.bpm, dtype=float)
        if t.ndim != 1 or t.size == 0 or t.shape != b.shape:
            raise ValueError("profile needs matching, non-empty time and bpm sequences")
        if t[0] < 0 or np.any(np.diff(t) <= 0):
            raise ValueError("profile times must be non-negative and strictly increasing")
        if np.any(b < BPM_BOUNDS[0]) or np.any(b > BPM_BOUNDS[1]):
            raise ValueError(f"profile bpm must lie within {BPM_BOUNDS}")
        object.__setattr__(self, "times_s", tuple(float(x) for x in t))
        object.__setattr__(self, "bpm", tuple(float(x) for x in b))

    @classmethod
    def constant(cls, bpm: float) -> "HrProfile":
        return cls((0.0,), (bpm,))

    def _knots(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = np.asarray(self.times_s)
        b = np.asarray(self.bpm)
        if t[0] > 0:
            t = np.concatenate([[0.0], t])
            b = np.concatenate([[b[0]], b])
        seg = np.diff(t)
        beats = (b[:-1] * seg + 0.5 * (b[1:] - b[:-1]) * seg) / 60.0
        return t, b, np.concatenate([[0.0], np.cumsum(beats)])

    def bpm_at(self, t) -> np.ndarray:
        return np.interp(t, self.times_s, self.bpm)

    def cycles(self, t) -> np.ndarray:
        """Exact number of beats elapsed by time ``t`` (integral of bpm/60)."""
        knots, b, cum = self._knots()
        t = np.asarray(t, dtype=float)
        i = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, knots.size - 1)
        d = t - knots[i]
        slope = np.zeros_like(d)
        inner = i < knots.size - 1
        slope[inner] = (b[i[inner] + 1] - b[i[inner]]) / (knots[i[inner] + 1] - knots[i[inner]])
        return cum[i] + (b[i] * d + 0.5 * slope * d * d) / 60.0

    def beat_times(self, duration_s: float) -> np.ndarray:
        """Times in ``(0, duration_s)`` where the phase crosses 2*pi*k, k = 1, 2, ..."""
        knots, b, cum = self._knots()
        total = float(self.cycles(duration_s))
        k = np.arange(1, int(np.floor(total)) + 1, dtype=float)
        i = np.clip(np.searchsorted(cum, k, side="right") - 1, 0, knots.size - 1)
        r = 60.0 * (k - cum[i])
        slope = np.zeros_like(r)
        inner = i < knots.size - 1
        slope[inner] = (b[i[inner] + 1] - b[i[inner]]) / (knots[i[inner] + 1] - knots[i[inner]])
        # root of 0.5*slope*d^2 + b*d - r = 0 in the cancellation-free form
        d = 2.0 * r / (b[i] + np.sqrt(b[i] * b[i] + 2.0 * slope * r))
        times = knots[i] + d
        return times[times < duration_s]


def _artifact(n: int, rate_hz: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(n)
    band = filter_zero_phase(noise, design_bandpass(*ARTIFACT_BAND_HZ, 2, rate_hz))
    band /= band.std() if band.std() > 0 else 1.0
    envelope = np.zeros(n)
    duration = n / rate_hz
    for _ in range(max(1, int(duration // 30))):
        length = rng.uniform(3.0, 10.0)
        start = rng.uniform(0.0, max(duration - length, 0.0))
        lo, hi = int(start * rate_hz), min(n, int((start + length) * rate_hz))
        if hi > lo:
            envelope[lo:hi] = np.maximum(envelope[lo:hi], np.hanning(hi - lo))
    return envelope * band


def synth_recording(
    subject_id: str,
    duration_s: float,
    profile: HrProfile,
    noise_sigma: float = 0.0,
    artifact_level: float = 0.0,
    seed: int | np.random.SeedSequence | None = 0,
) -> Recording:
    """PPG at 50 Hz and ECG at 400 Hz sharing one integrated cardiac phase.

    PPG = sin(phi) + 0.3 sin(2 phi + 0.5) + 0.2 sin(2 pi 0.1 t) + artifact
    bursts + Gaussian noise; ECG = unit Gaussian pulses (sigma 10 ms) at the
    beat times.
    """
    if duration_s <= 8.0:
        raise ValueError("duration must exceed 8 s")
    if noise_sigma < 0 or artifact_level < 0:
        raise ValueError("noise and artifact levels must be non-negative")
    rng = np.random.default_rng(seed)

    n_ppg = int(round(duration_s * PPG_RATE_HZ))
    t = np.arange(n_ppg) / PPG_RATE_HZ
    phase = 2.0 * np.pi * profile.cycles(t)
    ppg = (
        np.sin(phase)
        + SECOND_HARMONIC * np.sin(2.0 * phase + SECOND_HARMONIC_PHASE)
        + WANDER_AMPLITUDE * np.sin(2.0 * np.pi * WANDER_HZ * t)
    )
    if artifact_level > 0:
        ppg += artifact_level * _artifact(n_ppg, PPG_RATE_HZ, rng)
    if noise_sigma > 0:
        ppg += noise_sigma * rng.standard_normal(n_ppg)

    n_ecg = int(round(duration_s * ECG_RATE_HZ))
    ecg = np.zeros(n_ecg)
    reach = int(np.ceil(6 * ECG_PULSE_SIGMA_S * ECG_RATE_HZ))
    for beat in profile.beat_times(duration_s):
        center = beat * ECG_RATE_HZ
        lo, hi = max(0, int(center) - reach), min(n_ecg, int(center) + reach + 1)
        if hi <= lo:
            continue
        k = np.arange(lo, hi)
        ecg[lo:hi] += np.exp(-0.5 * ((k - center) / (ECG_PULSE_SIGMA_S * ECG_RATE_HZ)) ** 2)
    return Recording(subject_id, ppg, PPG_RATE_HZ, ecg, ECG_RATE_HZ)


def random_profile(duration_s: float, rng: np.random.Generator, step_s: float = 20.0) -> HrProfile:
    """Seeded random walk of breakpoints every ``step_s`` seconds."""
    times = np.arange(0.0, duration_s + step_s, step_s)
    bpm = np.empty(times.size)
    bpm[0] = rng.uniform(60.0, 120.0)
    for i in range(1, times.size):
        bpm[i] = np.clip(bpm[i - 1] + rng.normal(0.0, 8.0), 45.0, 170.0)
    return HrProfile(tuple(times), tuple(bpm))


def synth_cohort(
    n_subjects: int,
    duration_s: float = 300.0,
    seed: int = 0,
    noise_sigma: float = 0.1,
    artifact_level: float = 0.3,
) -> list[Recording]:
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    width = max(2, len(str(n_subjects)))
    cohort = []
    for i, child in enumerate(children):
        profile_seed, signal_seed = child.spawn(2)
        profile = random_profile(duration_s, np.random.default_rng(profile_seed))
        cohort.append(
            synth_recording(
                f"S{i + 1:0{width}d}", duration_s, profile, noise_sigma, artifact_level, signal_seed
            )
        )
    return cohort
