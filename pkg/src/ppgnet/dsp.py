"""Signal conditioning: resampling, windowing, Butterworth bandpass, per-subject z-scoring."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "FilterCoefficients",
    "design_bandpass",
    "sos_frequency_response",
    "filter_zero_phase",
    "resample_linear",
    "segment_windows",
    "window_count",
    "normalize_per_subject",
    "BandpassFilter",
]


@dataclass(frozen=True)
class FilterCoefficients:
    """Cascade of biquads, rows ``(b0, b1, b2, 1, a1, a2)``."""

    sos: np.ndarray
    low_hz: float
    high_hz: float
    prototype_order: int
    sample_rate_hz: float

    @property
    def order(self) -> int:
        """Order of the bandpass (twice the prototype order)."""
        return 2 * self.prototype_order

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(row[3:]) for row in self.sos])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))


def design_bandpass(
    low_hz: float = 0.5,
    high_hz: float = 5.0,
    prototype_order: int = 2,
    sample_rate_hz: float = 125.0,
) -> FilterCoefficients:
    """Digital Butterworth bandpass via prewarped bilinear transform.

    The analog lowpass prototype of ``prototype_order`` is mapped to a
    bandpass around the prewarped edges, so the digital filter has
    ``2 * prototype_order`` poles and -3 dB exactly at both edges. Each
    section carries the numerator ``1 - z^-2``, so the DC and Nyquist gains
    are exactly zero.
    """
    if prototype_order < 1:
        raise ValueError(f"prototype order must be >= 1, got {prototype_order}")
    if sample_rate_hz <= 0:
        raise ValueError("sample rate must be positive")
    if not 0.0 < low_hz < high_hz < sample_rate_hz / 2.0:
        raise ValueError(
            f"band edges must satisfy 0 < low < high < fs/2; got {low_hz}, {high_hz} at {sample_rate_hz} Hz"
        )
    fs2 = 2.0 * sample_rate_hz
    w_low = fs2 * math.tan(math.pi * low_hz / sample_rate_hz)
    w_high = fs2 * math.tan(math.pi * high_hz / sample_rate_hz)
    bandwidth = w_high - w_low
    w0_sq = w_low * w_high

    n = prototype_order
    proto = np.exp(1j * np.pi * (2 * np.arange(1, n + 1) + n - 1) / (2 * n))
    # s -> (s^2 + w0^2) / (B s): each prototype pole p splits into the roots of s^2 - pBs + w0^2
    disc = np.sqrt((proto * bandwidth) ** 2 - 4.0 * w0_sq + 0j)
    analog = np.concatenate([(proto * bandwidth + disc) / 2.0, (proto * bandwidth - disc) / 2.0])
    digital = (fs2 + analog) / (fs2 - analog)

    sections = []
    for pair in _conjugate_pairs(digital):
        a1 = -float(np.real(pair[0] + pair[1]))
        a2 = float(np.real(pair[0] * pair[1]))
        sections.append([1.0, 0.0, -1.0, 1.0, a1, a2])
    sos = np.array(sections)

    # unity gain at the digital image of the analog center frequency
    f_center = sample_rate_hz / math.pi * math.atan(math.sqrt(w0_sq) / fs2)
    gain = abs(sos_frequency_response(sos, np.array([f_center]), sample_rate_hz)[0])
    sos[0, :3] /= gain
    return FilterCoefficients(sos, float(low_hz), float(high_hz), int(n), float(sample_rate_hz))


def _conjugate_pairs(poles: np.ndarray) -> list[tuple[complex, complex]]:
    tol = 1e-12 * max(1.0, float(np.max(np.abs(poles))))
    upper = sorted((p for p in poles if p.imag > tol), key=lambda p: (abs(p), p.real))
    real = sorted((p.real for p in poles if abs(p.imag) <= tol))
    pairs = [(p, np.conj(p)) for p in upper]
    if len(real) % 2:
        raise RuntimeError("odd number of real poles in a bandpass design")
    pairs += [(complex(real[i]), complex(real[i + 1])) for i in range(0, len(real), 2)]
    return pairs


def sos_frequency_response(sos: np.ndarray, freqs_hz: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """Complex response of a biquad cascade at the given frequencies."""
    z_inv = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=float) / sample_rate_hz)
    h = np.ones_like(z_inv)
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * z_inv + b2 * z_inv ** 2) / (a0 + a1 * z_inv + a2 * z_inv ** 2)
    return h


def filter_zero_phase(x, coeffs: FilterCoefficients) -> np.ndarray:
    """Forward-backward filtering with mirror-reflection padding of 3x the filter order.

    Works along the last axis, so a stack of windows is filtered row by row.
    """
    x = np.asarray(x, dtype=np.float64)
    padlen = 3 * coeffs.order
    if x.shape[-1] < padlen:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than the {padlen}-sample edge padding")
    # scipy needs strictly more samples than padding
    return sps.sosfiltfilt(coeffs.sos, x, axis=-1, padtype="even", padlen=min(padlen, x.shape[-1] - 1))


def resample_linear(x, from_hz: float, to_hz: float) -> np.ndarray:
    """Linear interpolation onto a new uniform grid starting at t=0.

    Output length is ``round(len * to_hz / from_hz)``; instants past the
    last input sample hold its value.
    """
    x = np.asarray(x, dtype=np.float64)
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sample rates must be positive")
    if x.ndim != 1 or x.size == 0:
        raise ValueError("resample_linear needs a non-empty 1-D signal")
    if from_hz == to_hz:
        return x.copy()
    n_out = int(round(x.size * to_hz / from_hz))
    t_in = np.arange(x.size) / from_hz
    t_out = np.arange(n_out) / to_hz
    return np.interp(t_out, t_in, x)


def window_count(n_samples: int, window: int, shift: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // shift + 1


def segment_windows(x, rate_hz: float = 125.0, window_s: float = 8.0, shift_s: float = 2.0) -> np.ndarray:
    """Sliding windows as a ``(n, window)`` array; window ``i`` starts at ``i * shift``."""
    if rate_hz <= 0 or window_s <= 0 or shift_s <= 0:
        raise ValueError("sample rate, window length and shift must all be positive")
    x = np.asarray(x, dtype=np.float64)
    window = int(round(window_s * rate_hz))
    shift = int(round(shift_s * rate_hz))
    n = window_count(x.size, window, shift)
    if n == 0:
        return np.empty((0, window))
    starts = np.arange(n) * shift
    return x[starts[:, None] + np.arange(window)[None, :]]


def _flat_tolerance(mean):
    # a constant signal leaves roundoff-level spread, not an exact zero
    return 1e-12 * np.maximum(np.abs(mean), 1.0)


def normalize_per_subject(windows, stats: str = "subject") -> np.ndarray:
    """Z-score one subject's windows.

    ``stats="subject"`` uses the mean and population std pooled over all of
    the subject's samples; ``"window"`` standardizes each window on its own.
    """
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ValueError("need a non-empty (n_windows, n_samples) array")
    if stats == "subject":
        mean, std = w.mean(), w.std()
        if not std > _flat_tolerance(mean):
            raise ValueError("zero-variance subject signal cannot be normalized")
        return (w - mean) / std
    if stats == "window":
        mean = w.mean(axis=1, keepdims=True)
        std = w.std(axis=1, keepdims=True)
        if np.any(~(std > _flat_tolerance(mean))):
            raise ValueError("zero-variance window cannot be normalized")
        return (w - mean) / std
    raise ValueError(f"unknown normalization statistics {stats!r}")


class BandpassFilter(TransformerMixin, BaseEstimator):
    """Zero-phase Butterworth bandpass applied row-wise to ``(n_windows, n_samples)``."""

    def __init__(self, low_hz=0.5, high_hz=5.0, prototype_order=2, sample_rate_hz=125.0):
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.prototype_order = prototype_order
        self.sample_rate_hz = sample_rate_hz

    def fit(self, X=None, y=None):
        self.coefficients_ = design_bandpass(
            self.low_hz, self.high_hz, self.prototype_order, self.sample_rate_hz
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "coefficients_")
        X = check_array(X, dtype=np.float64)
        return filter_zero_phase(X, self.coefficients_)
