"""Zero-frequency filtering epoch detector, used as the comparison baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .egg_annotate import GciMarks, MarkSource
from .signal_core import TARGET_RATE, Waveform, lowpass

MIN_EPOCH_SPACING_MS = 2.0
VOICING_THRESHOLD = 0.3  # normalized autocorrelation peak below this => no pitch


@dataclass(frozen=True)
class ZffConfig:
    trend_window_factor: float = 1.5
    trend_passes: int = 3
    f0_search_hz: tuple[float, float] = (60.0, 500.0)
    polarity: int = -1  # -1: excitation is a negative excursion (prepared speech)

    def __post_init__(self):
        if self.trend_window_factor <= 0:
            raise ValueError("trend_window_factor must be positive")
        if self.trend_passes < 1:
            raise ValueError("trend_passes must be >= 1")
        lo, hi = self.f0_search_hz
        if not 0 < lo < hi:
            raise ValueError("f0_search_hz must be an increasing positive pair")
        if self.polarity not in (-1, 1):
            raise ValueError("polarity must be -1 or 1")


@dataclass(frozen=True)
class ZffResult:
    marks: GciMarks
    period_samples: int
    confident: bool


def zfr_cascade(x) -> np.ndarray:
    """Difference the input, then run it through two resonators with a double pole at z = 1."""
    x = np.asarray(x, dtype=np.float64)
    d = np.diff(x, prepend=0.0)
    y = lfilter([1.0], [1.0, -2.0, 1.0], d)
    return lfilter([1.0], [1.0, -2.0, 1.0], y)


def remove_trend(y, half_width: int, passes: int = 1) -> np.ndarray:
    """Subtract the local mean over ``[n - hw, n + hw]``, truncated at the edges, ``passes`` times.

    Window sums are formed by direct convolution rather than a running sum:
    the resonator output is huge and a cumulative sum would lose the small
    residual in rounding.
    """
    if half_width < 1:
        raise ValueError("half_width must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    kernel = np.ones(2 * half_width + 1)
    counts = np.convolve(np.ones(len(y)), kernel, mode="same")
    for _ in range(passes):
        y = y - np.convolve(y, kernel, mode="same") / counts
    return y


def estimate_pitch_period(x, sample_rate_hz: int = TARGET_RATE,
                          f0_search_hz=(60.0, 500.0)) -> tuple[int, float]:
    """Autocorrelation pitch period of the low-passed signal, with its normalized peak height."""
    v = lowpass(np.asarray(x, dtype=np.float64), sample_rate_hz)
    v = v - v.mean()
    lo = int(np.floor(sample_rate_hz / f0_search_hz[1]))
    hi = int(np.ceil(sample_rate_hz / f0_search_hz[0]))
    if len(v) <= hi:
        return 0, 0.0
    spec = np.fft.rfft(v, 2 * len(v))
    r = np.fft.irfft(spec * np.conj(spec))[: hi + 1]
    if r[0] <= 0:
        return 0, 0.0
    lag = lo + int(np.argmax(r[lo:hi + 1]))
    return lag, float(r[lag] / r[0])


def zff_analyze(x: Waveform | np.ndarray, config: ZffConfig = ZffConfig(),
                sample_rate_hz: int = TARGET_RATE) -> ZffResult:
    if isinstance(x, Waveform):
        sample_rate_hz = x.sample_rate_hz
        x = x.samples
    x = np.asarray(x, dtype=np.float64)
    empty = GciMarks(np.zeros(0, np.int64), MarkSource.DETECTOR, sample_rate_hz)
    period, strength = estimate_pitch_period(x, sample_rate_hz, config.f0_search_hz)
    if period == 0 or strength < VOICING_THRESHOLD:
        return ZffResult(empty, period, False)

    half_width = max(1, int(round(config.trend_window_factor * period / 2)))
    z = remove_trend(zfr_cascade(x), half_width, config.trend_passes)
    # A negative excitation impulse leaves the filtered signal rising through
    # zero at the impulse; a positive one, falling.
    rising = (z[:-1] < 0) & (z[1:] >= 0)
    falling = (z[:-1] >= 0) & (z[1:] < 0)
    idx = np.flatnonzero(rising if config.polarity < 0 else falling) + 1

    min_gap = int(round(MIN_EPOCH_SPACING_MS * sample_rate_hz / 1000))
    kept = []
    for i in idx:
        if not kept or i - kept[-1] >= min_gap:
            kept.append(int(i))
    return ZffResult(GciMarks(np.array(kept, np.int64), MarkSource.DETECTOR, sample_rate_hz), period, True)


def zff_epochs(x: Waveform | np.ndarray, config: ZffConfig = ZffConfig(),
               sample_rate_hz: int = TARGET_RATE) -> GciMarks:
    return zff_analyze(x, config, sample_rate_hz).marks
