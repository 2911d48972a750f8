"""Waveforms, WAV I/O, resampling, Butterworth low-pass and zero-phase filtering."""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

TARGET_RATE = 16000
PEAK_LEVEL = 0.99
MIN_INPUT_RATE = 2000

LOWPASS_ORDER = 6
LOWPASS_CUTOFF_HZ = 1000.0

# Kaiser windowed-sinc resampler: 64 taps per polyphase branch.
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 8.6


class Role(enum.Enum):
    SPEECH = "Speech"
    EGG = "Egg"


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int
    role: Role = Role.SPEECH

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


class WavFormatError(ValueError):
    """Raised for unreadable or unsupported WAV files."""


# --------------------------------------------------------------------------- #
# WAV I/O
# --------------------------------------------------------------------------- #

def read_wav(path) -> tuple[Waveform, Waveform | None]:
    """Read a mono or 2-channel WAV as ``(speech, egg)``.

    Channel 0 is speech, channel 1 (if present) is the EGG. Integer PCM is
    scaled by ``2**(bits-1)`` so full-scale negative maps to -1.0.
    """
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (OSError, ValueError, EOFError) as exc:
        raise WavFormatError(f"cannot read WAV file {path}: {exc}") from exc

    if data.dtype == np.int16:
        scaled = data.astype(np.float64) / 2.0**15
    elif data.dtype == np.int32:
        scaled = data.astype(np.float64) / 2.0**31
    elif data.dtype == np.float32:
        scaled = data.astype(np.float64)
    else:
        raise WavFormatError(f"unsupported sample encoding {data.dtype} in {path}")

    if scaled.ndim == 1:
        scaled = scaled[:, None]
    if scaled.shape[0] == 0:
        raise WavFormatError(f"zero-length audio in {path}")
    if scaled.shape[1] > 2:
        raise WavFormatError(f"expected mono or stereo, found {scaled.shape[1]} channels in {path}")

    speech = Waveform(scaled[:, 0], int(rate), Role.SPEECH)
    egg = Waveform(scaled[:, 1], int(rate), Role.EGG) if scaled.shape[1] == 2 else None
    return speech, egg


def write_wav(path, speech: Waveform, egg: Waveform | None = None, encoding: str = "pcm16") -> None:
    """Write speech (and optionally EGG as channel 1) to a WAV file.

    ``encoding`` is ``"pcm16"`` or ``"float32"``. Samples are clipped to
    [-1, 1) for PCM.
    """
    chans = [speech.samples]
    if egg is not None:
        if egg.sample_rate_hz != speech.sample_rate_hz or len(egg) != len(speech):
            raise ValueError("speech and EGG must share rate and length")
        chans.append(egg.samples)
    data = np.stack(chans, axis=1) if len(chans) > 1 else chans[0]

    if encoding == "pcm16":
        q = np.round(np.clip(data, -1.0, 1.0) * 2.0**15)
        out = np.clip(q, -(2**15), 2**15 - 1).astype("<i2")
    elif encoding == "float32":
        out = data.astype("<f4")
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    wavfile.write(os.fspath(path), speech.sample_rate_hz, out)


# --------------------------------------------------------------------------- #
# Resampling and preparation
# --------------------------------------------------------------------------- #

def _resample_kernel(up: int, down: int) -> np.ndarray:
    half_len = RESAMPLE_TAPS_PER_PHASE // 2 * max(up, down)
    return sps.firwin(
        2 * half_len + 1,
        1.0 / max(up, down),
        window=("kaiser", RESAMPLE_KAISER_BETA),
    )


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling between integer rates."""
    x = np.asarray(x, dtype=np.float64)
    if rate_in == rate_out:
        return x.copy()
    g = gcd(int(rate_in), int(rate_out))
    up, down = rate_out // g, rate_in // g
    return sps.resample_poly(x, up, down, window=_resample_kernel(up, down))


def peak_normalize(x: np.ndarray, peak: float = PEAK_LEVEL) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(np.abs(x)) if len(x) else 0.0
    if m == 0.0:
        return x.copy()
    return (x / m) * peak


def _extrema_means(x: np.ndarray, k: int = 10) -> tuple[float, float]:
    # interior local extrema; fall back to raw samples for tiny inputs
    interior = x[1:-1]
    is_min = (interior <= x[:-2]) & (interior < x[2:])
    is_max = (interior >= x[:-2]) & (interior > x[2:])
    mins = -interior[is_min]
    maxs = interior[is_max]
    if len(mins) == 0:
        mins = -x
    if len(maxs) == 0:
        maxs = x
    top_min = np.sort(mins)[-k:]
    top_max = np.sort(maxs)[-k:]
    return float(np.mean(top_min)), float(np.mean(top_max))


def needs_polarity_flip(x: np.ndarray, sample_rate_hz: int) -> bool:
    """Polarity heuristic: True when positive excursions dominate.

    Compares the 10 deepest local minima with the 10 highest local maxima of
    the 1 kHz low-passed signal; GCIs should appear as negative peaks.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= 6 * LOWPASS_ORDER or not np.any(x):
        return False
    lp = filtfilt(design_butterworth_lowpass(LOWPASS_ORDER, LOWPASS_CUTOFF_HZ, sample_rate_hz), x)
    neg, pos = _extrema_means(lp)
    return neg < pos


def prepare_speech(w: Waveform, flip_polarity: bool | str = False) -> Waveform:
    """Resample to 16 kHz, optionally negate, and peak-normalize to 0.99.

    ``flip_polarity`` may be ``True``, ``False`` or ``"auto"``.
    """
    if w.role is not Role.SPEECH:
        raise ValueError("prepare_speech expects a speech waveform")
    if w.sample_rate_hz < MIN_INPUT_RATE:
        raise ValueError(f"implausible sample rate {w.sample_rate_hz} Hz (< {MIN_INPUT_RATE})")

    x = resample(w.samples, w.sample_rate_hz, TARGET_RATE)
    if flip_polarity == "auto":
        flip = needs_polarity_flip(x, TARGET_RATE)
    elif isinstance(flip_polarity, bool):
        flip = flip_polarity
    else:
        raise ValueError(f"flip_polarity must be bool or 'auto', got {flip_polarity!r}")
    if flip:
        x = -x
    return Waveform(peak_normalize(x), TARGET_RATE, Role.SPEECH)


def prepare_egg(w: Waveform) -> Waveform:
    """Resample an EGG channel to 16 kHz without touching its polarity."""
    if w.sample_rate_hz < MIN_INPUT_RATE:
        raise ValueError(f"implausible sample rate {w.sample_rate_hz} Hz (< {MIN_INPUT_RATE})")
    return Waveform(resample(w.samples, w.sample_rate_hz, TARGET_RATE), TARGET_RATE, Role.EGG)


# --------------------------------------------------------------------------- #
# IIR design and filtering
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class IirFilter:
    """Cascade of biquads; rows are ``[b0, b1, b2, 1, a1, a2]``."""

    sections: np.ndarray

    def __post_init__(self):
        sos = np.array(self.sections, dtype=np.float64).reshape(-1, 6)
        if not np.allclose(sos[:, 3], 1.0):
            raise ValueError("biquad denominators must be normalized (a0 == 1)")
        sos.setflags(write=False)
        object.__setattr__(self, "sections", sos)

    @property
    def order(self) -> int:
        return 2 * len(self.sections)

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(s[3:]) for s in self.sections])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freqs_hz, sample_rate_hz: float) -> np.ndarray:
        """Complex frequency response at the given frequencies."""
        w = 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / sample_rate_hz
        z1 = np.exp(-1j * w)
        z2 = z1 * z1
        h = np.ones_like(z1)
        for b0, b1, b2, _, a1, a2 in self.sections:
            h *= (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
        return h

    def gain_db(self, freqs_hz, sample_rate_hz: float) -> np.ndarray:
        return 20 * np.log10(np.abs(self.response(freqs_hz, sample_rate_hz)))


def design_butterworth_lowpass(order: int, cutoff_hz: float, sample_rate_hz: int) -> IirFilter:
    """Digital Butterworth low-pass via bilinear transform with prewarping.

    Only even orders are supported; the result is ``order // 2`` biquads.
    """
    if order <= 0 or order % 2:
        raise ValueError(f"order must be a positive even integer, got {order}")
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {sample_rate_hz / 2})")

    k = math.tan(math.pi * cutoff_hz / sample_rate_hz)
    k2 = k * k
    rows = []
    for i in range(1, order // 2 + 1):
        # analog pole pair s^2 + q s + 1 with q = -2 Re(p_i)
        q = 2.0 * math.sin(math.pi * (2 * i - 1) / (2 * order))
        norm = 1.0 / (1.0 + q * k + k2)
        b0 = k2 * norm
        a1 = 2.0 * (k2 - 1.0) * norm
        a2 = (1.0 - q * k + k2) * norm
        rows.append([b0, 2.0 * b0, b0, 1.0, a1, a2])
    return IirFilter(np.array(rows))


def butterworth_magnitude(freqs_hz, order: int, cutoff_hz: float, sample_rate_hz: float) -> np.ndarray:
    """Closed-form magnitude of the prewarped bilinear Butterworth design."""
    f = np.asarray(freqs_hz, dtype=np.float64)
    ratio = np.tan(np.pi * f / sample_rate_hz) / math.tan(math.pi * cutoff_hz / sample_rate_hz)
    return 1.0 / np.sqrt(1.0 + ratio ** (2 * order))


def lfilter_sos(f: IirFilter, x: np.ndarray, zi: np.ndarray | None = None):
    """Single forward pass through the cascade. Returns ``(y, zf)`` when ``zi`` is given."""
    x = np.asarray(x, dtype=np.float64)
    sos = np.array(f.sections)  # sosfilt needs a writable buffer
    if zi is None:
        return sps.sosfilt(sos, x)
    return sps.sosfilt(sos, x, zi=zi)


def filtfilt(f: IirFilter, x: np.ndarray) -> np.ndarray:
    """Zero-phase forward-backward filtering with odd-reflection padding.

    The input is extended by ``3 * order`` samples at each end. Initial states
    for the two passes are chosen so that forward-backward and backward-forward
    filtering agree (Gustafsson's criterion), which makes the result exactly
    reversal-symmetric and leaves constants untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    padlen = 3 * f.order
    if x.ndim != 1 or len(x) <= 3 * (2 * f.order):
        raise ValueError(f"signal of length {len(x)} too short for zero-phase filtering "
                         f"(need > {3 * 2 * f.order})")
    left = 2 * x[0] - x[padlen:0:-1]
    right = 2 * x[-1] - x[-2:-padlen - 2:-1]
    ext = np.concatenate([left, x, right])

    sos = np.array(f.sections)
    n, m = len(ext), 2 * len(sos)
    # zero-input response of the cascade to each unit state
    obs = np.empty((n, m))
    for k in range(m):
        zi = np.zeros(m)
        zi[k] = 1.0
        obs[:, k] = sps.sosfilt(sos, np.zeros(n), zi=zi.reshape(-1, 2))[0]
    s = sps.sosfilt(sos, obs[::-1], axis=0)
    sr, obsr = s[::-1], obs[::-1]

    y_fb = sps.sosfilt(sos, sps.sosfilt(sos, ext)[::-1])[::-1]
    y_bf = sps.sosfilt(sos, sps.sosfilt(sos, ext[::-1])[::-1])
    ic = np.linalg.lstsq(np.hstack([sr - obs, obsr - s]), y_bf - y_fb, rcond=None)[0]
    y = y_fb + np.hstack([sr, obsr]) @ ic
    return y[padlen:-padlen].copy()


def lowpass(x: np.ndarray, sample_rate_hz: int = TARGET_RATE) -> np.ndarray:
    """The fixed 6th-order, 1 kHz zero-phase low-pass used for all representations."""
    return filtfilt(design_butterworth_lowpass(LOWPASS_ORDER, LOWPASS_CUTOFF_HZ, sample_rate_hz), x)


def positive_clip(x: np.ndarray) -> np.ndarray:
    """Remove the positive part of a signal: ``min(x, 0)``."""
    return np.minimum(np.asarray(x, dtype=np.float64), 0.0)
