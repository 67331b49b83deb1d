"""Filtering, spectra, alignment and error metrics for displacement series."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal


class Unit(enum.Enum):
    MM = "mm"
    PX = "px"


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    sample_rate: float
    unit: Unit = Unit.MM

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("time series contains non-finite values")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "unit", Unit(self.unit))

    def __len__(self):
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) / self.sample_rate

    @property
    def duration(self) -> float:
        return self.values.size / self.sample_rate


@dataclass(frozen=True)
class Spectrum:
    frequencies: np.ndarray
    power: np.ndarray

    def peak_frequency(self, skip_dc: bool = True) -> float:
        start = 1 if skip_dc and self.frequencies.size > 1 else 0
        return float(self.frequencies[start + int(np.argmax(self.power[start:]))])

    @property
    def resolution(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])


def butterworth_lowpass(s: TimeSeries, order: int = 3, cutoff: float = 30.0) -> TimeSeries:
    """Zero-phase Butterworth low-pass (forward-backward second-order sections).

    The magnitude response is squared by the two passes, so the cutoff sits
    at -6 dB overall rather than -3 dB.
    """
    nyquist = 0.5 * s.sample_rate
    if not 0 < cutoff < nyquist:
        raise ValueError(f"cutoff must lie in (0, {nyquist:g}) Hz, got {cutoff}")
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    sos = signal.butter(order, cutoff, btype="low", fs=s.sample_rate, output="sos")
    padlen = min(3 * (2 * len(sos) + 1), s.values.size - 1)
    return TimeSeries(signal.sosfiltfilt(sos, s.values, padlen=max(padlen, 0)), s.sample_rate, s.unit)


def butterworth_response(order: int, cutoff: float, sample_rate: float, freqs) -> np.ndarray:
    """Single-pass complex frequency response of :func:`butterworth_lowpass`'s filter."""
    sos = signal.butter(order, cutoff, btype="low", fs=sample_rate, output="sos")
    _, h = signal.sosfreqz(sos, worN=np.asarray(freqs, dtype=np.float64), fs=sample_rate)
    return h


def psd(s: TimeSeries, segment_length: int = 256) -> Spectrum:
    """Welch estimate: Hann segments, 50 % overlap, density scaling."""
    if segment_length < 8:
        raise ValueError(f"segment_length must be >= 8, got {segment_length}")
    if s.values.size < segment_length:
        raise ValueError(f"series of {s.values.size} samples is shorter than one {segment_length}-sample segment")
    f, p = signal.welch(s.values, fs=s.sample_rate, window="hann", nperseg=segment_length,
                        noverlap=segment_length // 2, detrend=False, scaling="density")
    return Spectrum(f, p)


def resample(s: TimeSeries, rate: float) -> TimeSeries:
    """Linear interpolation onto a ``rate`` grid spanning the same duration."""
    if rate == s.sample_rate:
        return s
    n = int(np.floor((s.values.size - 1) * rate / s.sample_rate)) + 1
    t = np.arange(n) / rate
    return TimeSeries(np.interp(t, s.times, s.values), rate, s.unit)


def synchronize(a: TimeSeries, b: TimeSeries, lag_window: float = 2.0) -> int:
    """Lag (in samples of ``a``'s rate) by which ``b`` trails ``a``.

    ``b`` is first resampled to ``a``'s rate. The lag maximises the
    normalised cross-correlation of the mean-removed overlap over
    ``+-lag_window`` seconds; ties go to the smallest ``|lag|``, then to the
    positive one.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot synchronise empty series")
    b = resample(b, a.sample_rate)
    x = a.values - a.values.mean()
    y = b.values - b.values.mean()
    if not np.any(x) or not np.any(y):
        raise ValueError("cannot synchronise a zero-variance series")
    max_lag = int(round(lag_window * a.sample_rate))
    max_lag = min(max_lag, x.size - 1, y.size - 1)
    best, best_score = 0, -np.inf
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda k: (abs(k), -k)):
        if lag >= 0:
            xs, ys = x[:max(0, min(x.size, y.size - lag))], y[lag:lag + x.size]
        else:
            xs, ys = x[-lag:-lag + y.size], y[:max(0, min(y.size, x.size + lag))]
        n = min(xs.size, ys.size)
        if n < 2:
            continue
        xs, ys = xs[:n], ys[:n]
        den = np.sqrt((xs * xs).sum() * (ys * ys).sum())
        if den == 0:
            continue
        score = (xs * ys).sum() / den
        if score > best_score + 1e-12:
            best, best_score = lag, score
    return best


def align(a: TimeSeries, b: TimeSeries, lag_window: float = 2.0):
    """Resample ``b`` to ``a``'s rate, shift by the synchronising lag and crop
    both to their overlap. Returns the aligned pair and the lag."""
    lag = synchronize(a, b, lag_window)
    b = resample(b, a.sample_rate)
    x, y = a.values, b.values
    if lag >= 0:
        y = y[lag:]
    else:
        x = x[-lag:]
    n = min(x.size, y.size)
    if n < 1:
        raise ValueError("series do not overlap")
    return TimeSeries(x[:n], a.sample_rate, a.unit), TimeSeries(y[:n], a.sample_rate, b.unit), lag


@dataclass(frozen=True)
class ErrorMetrics:
    rmse: float
    max_abs_measured: float
    max_abs_reference: float
    max_error_pct: float
    rmse_over_max_pct: float

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


def error_metrics(measured, reference) -> ErrorMetrics:
    """RMSE plus peak-amplitude and RMSE-to-peak percentages against ``reference``."""
    m = measured.values if isinstance(measured, TimeSeries) else np.asarray(measured, dtype=np.float64)
    r = reference.values if isinstance(reference, TimeSeries) else np.asarray(reference, dtype=np.float64)
    if isinstance(measured, TimeSeries) and isinstance(reference, TimeSeries) \
            and measured.sample_rate != reference.sample_rate:
        raise ValueError("series sample rates differ; resample first")
    if m.shape != r.shape:
        raise ValueError(f"length mismatch: {m.size} vs {r.size}")
    rmse = float(np.sqrt(np.mean((m - r) ** 2)))
    mm, mr = float(np.max(np.abs(m))), float(np.max(np.abs(r)))
    return ErrorMetrics(rmse, mm, mr, abs(mm - mr) / mr * 100.0, rmse / mr * 100.0)


def metrics_from_summary(rmse: float, max_measured: float, max_reference: float) -> ErrorMetrics:
    """Metrics from already reduced quantities, e.g. a summary table of maxima and RMSE."""
    return ErrorMetrics(rmse, max_measured, max_reference,
                        abs(max_measured - max_reference) / max_reference * 100.0,
                        rmse / max_reference * 100.0)


def write_spectrum_csv(path, spec: Spectrum) -> None:
    lines = ["freq_hz,psd"] + [f"{f:.6f},{p:.9e}" for f, p in zip(spec.frequencies, spec.power)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_metrics_json(path, metrics: ErrorMetrics) -> None:
    Path(path).write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
