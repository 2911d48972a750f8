"""Reference GCI marks from the EGG channel, with EGG-to-speech delay compensation."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import minimum_filter1d

from . import _io
from .lp_residual import lp_residual
from .signal_core import TARGET_RATE, Waveform, lowpass, positive_clip

MIN_DISTANCE = 32  # 2 ms at 16 kHz, F0 <= 500 Hz
REL_THRESHOLD = 0.2
MAX_DELAY_MS = 20.0
MIN_MARKS_FOR_DELAY = 10
CONFIDENCE_RATIO = 1.5
TIE_TOLERANCE = 0.1


class MarkSource(enum.Enum):
    EGG_REFERENCE = "EggReference"
    DETECTOR = "Detector"
    SYNTHETIC = "Synthetic"


@dataclass(frozen=True)
class GciMarks:
    positions: np.ndarray
    source: MarkSource = MarkSource.DETECTOR
    sample_rate_hz: int = TARGET_RATE

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1)
        if len(pos) > 1 and np.any(np.diff(pos) <= 0):
            raise ValueError("GCI marks must be strictly increasing")
        if len(pos) and pos[0] < 0:
            raise ValueError("GCI marks must be non-negative")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.positions)

    def shifted(self, offset: int, length: int | None = None) -> GciMarks:
        """Shift by ``offset`` samples, dropping marks outside ``[0, length)``."""
        pos = self.positions + int(offset)
        keep = pos >= 0
        if length is not None:
            keep &= pos < length
        return GciMarks(pos[keep], self.source, self.sample_rate_hz)


class UnreliableDelayError(ValueError):
    """Too few closure marks to estimate the EGG-to-speech delay."""


# --------------------------------------------------------------------------- #
# dEGG and peak picking
# --------------------------------------------------------------------------- #

def degg(egg) -> np.ndarray:
    """First difference of the EGG with ``d[0] = 0``."""
    x = np.asarray(egg, dtype=np.float64)
    d = np.zeros_like(x)
    d[1:] = x[1:] - x[:-1]
    return d


def pick_closure_peaks(d, min_distance_samples: int = MIN_DISTANCE,
                       rel_threshold: float = REL_THRESHOLD,
                       source: MarkSource = MarkSource.EGG_REFERENCE) -> GciMarks:
    """Negative dEGG peaks below ``-rel_threshold * max|d|``.

    A candidate must be the minimum within +-``min_distance_samples``;
    candidates are accepted left to right and any closer than
    ``min_distance_samples`` to the last accepted mark is skipped.
    """
    d = np.asarray(d, dtype=np.float64)
    if len(d) == 0:
        raise ValueError("empty dEGG signal")
    peak = np.max(np.abs(d))
    if peak == 0.0:
        return GciMarks(np.array([], dtype=np.int64), source)

    local_min = minimum_filter1d(d, size=2 * min_distance_samples + 1, mode="nearest")
    cand = np.flatnonzero((d <= -rel_threshold * peak) & (d == local_min))

    accepted = []
    last = None
    for n in cand:
        if last is None or n - last >= min_distance_samples:
            accepted.append(n)
            last = n
    return GciMarks(np.array(accepted, dtype=np.int64), source)


# --------------------------------------------------------------------------- #
# Delay compensation
# --------------------------------------------------------------------------- #

def _usable_marks(n_samples: int, marks: GciMarks, max_delay: int) -> np.ndarray:
    pos = marks.positions
    return pos[pos + max_delay < n_samples]


def delay_objective(speech_repr, marks: GciMarks, max_delay_ms: float = MAX_DELAY_MS,
                    sample_rate_hz: int = TARGET_RATE) -> np.ndarray:
    """``obj[d] = sum_i -speech_repr[marks[i] + d]`` for ``d = 0..max_delay``.

    Only marks for which every shift stays inside the signal contribute, so all
    lags are scored over the same cycles.
    """
    x = np.asarray(speech_repr, dtype=np.float64)
    max_delay = int(round(max_delay_ms * sample_rate_hz / 1000.0))
    pos = _usable_marks(len(x), marks, max_delay)
    if len(pos) < MIN_MARKS_FOR_DELAY:
        raise UnreliableDelayError(
            f"{len(pos)} usable marks, need at least {MIN_MARKS_FOR_DELAY} for delay estimation")
    idx = pos[:, None] + np.arange(max_delay + 1)[None, :]
    return -x[idx].sum(axis=0)


def estimate_delay(speech_repr, marks: GciMarks, max_delay_ms: float = MAX_DELAY_MS,
                   sample_rate_hz: int = TARGET_RATE, tie_tolerance: float = TIE_TOLERANCE) -> int:
    """Lag that lines EGG closures up with the most negative speech excursions.

    The objective repeats every pitch period, so peaks within
    ``tie_tolerance`` (relative) of the maximum count as ties and the smallest
    such lag wins. ``tie_tolerance=0`` is a plain first-argmax.
    """
    obj = delay_objective(speech_repr, marks, max_delay_ms, sample_rate_hz)
    best = float(obj.max())
    if tie_tolerance <= 0.0 or best <= 0.0:
        return int(np.argmax(obj))
    left = np.concatenate([[-np.inf], obj[:-1]])
    right = np.concatenate([obj[1:], [-np.inf]])
    peaks = np.flatnonzero((obj >= left) & (obj >= right) & (obj >= (1.0 - tie_tolerance) * best))
    return int(peaks[0])


def delay_confidence(speech_repr, marks: GciMarks, max_delay_ms: float = MAX_DELAY_MS,
                     sample_rate_hz: int = TARGET_RATE) -> float:
    """Peak-to-mean ratio of the delay objective (< 1.5 means low confidence)."""
    obj = delay_objective(speech_repr, marks, max_delay_ms, sample_rate_hz)
    mean = float(np.mean(obj))
    if mean <= 0.0:
        return float("inf") if obj.max() > 0 else 0.0
    return float(obj.max() / mean)


def delay_representation(speech) -> np.ndarray:
    """Positive-clipped, low-passed LP residual of prepared 16 kHz speech.

    The residual removes the vocal-tract ringing that would otherwise bias the
    delay by roughly a quarter of the first-formant period; clipping keeps the
    objective non-negative so the peak-to-mean confidence is meaningful.
    """
    x = np.asarray(speech, dtype=np.float64)
    return positive_clip(lowpass(lp_residual(x)))


@dataclass(frozen=True)
class Annotation:
    marks: GciMarks
    delay_samples: int
    confident: bool


def annotate_recording(speech: Waveform, egg: Waveform,
                       max_delay_ms: float = MAX_DELAY_MS,
                       min_distance_samples: int = MIN_DISTANCE,
                       rel_threshold: float = REL_THRESHOLD) -> Annotation:
    """dEGG peak picking followed by a single per-recording delay shift."""
    if len(speech) != len(egg) or speech.sample_rate_hz != egg.sample_rate_hz:
        raise ValueError("speech and EGG must have equal length and sample rate")
    if speech.sample_rate_hz != TARGET_RATE:
        raise ValueError(f"annotation expects {TARGET_RATE} Hz input")

    closures = pick_closure_peaks(degg(egg.samples), min_distance_samples, rel_threshold)
    if len(closures) == 0:
        return Annotation(closures, 0, False)

    repr_ = delay_representation(speech.samples)
    try:
        delay = estimate_delay(repr_, closures, max_delay_ms, speech.sample_rate_hz)
        confident = delay_confidence(repr_, closures, max_delay_ms,
                                     speech.sample_rate_hz) >= CONFIDENCE_RATIO
    except UnreliableDelayError:
        delay, confident = 0, False
    marks = closures.shifted(delay, len(speech))
    return Annotation(GciMarks(marks.positions, MarkSource.EGG_REFERENCE), delay, confident)


def annotate(speech: Waveform, egg: Waveform, **kwargs) -> GciMarks:
    return annotate_recording(speech, egg, **kwargs).marks


# --------------------------------------------------------------------------- #
# Mark files
# --------------------------------------------------------------------------- #

def format_marks(marks: GciMarks) -> str:
    lines = [f"# rate={marks.sample_rate_hz} source={marks.source.value}"]
    lines += [str(int(p)) for p in marks.positions]
    return "\n".join(lines) + "\n"


def write_marks(path, marks: GciMarks) -> None:
    _io.atomic_write_text(path, format_marks(marks))


def read_marks(path) -> GciMarks:
    text = Path(path).read_text(encoding="utf-8")
    rate, source = TARGET_RATE, MarkSource.DETECTOR
    values = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                key, _, val = token.partition("=")
                if key == "rate":
                    rate = int(val)
                elif key == "source":
                    source = MarkSource(val)
            continue
        try:
            values.append(int(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: not an integer sample index: {line!r}") from exc
    return GciMarks(np.array(values, dtype=np.int64), source, rate)
