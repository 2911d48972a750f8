from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .egg_annotate import GciMarks, MarkSource
from .frame_dataset import FRAME_LEN
from .signal_core import TARGET_RATE

PEAK_SIGNALS = ("LPF_S", "LPF_LPR")


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.1
    merge_adjacent: bool = False
    peak_signal: str = "LPF_S"

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.peak_signal not in PEAK_SIGNALS:
            raise ValueError(f"peak_signal must be one of {PEAK_SIGNALS}")


def classify_frames(p, threshold: float = 0.1) -> np.ndarray:
    """1 where the posterior reaches the threshold (inclusive)."""
    return (np.asarray(p, dtype=np.float64) >= threshold).astype(np.uint8)


def _regions(b: np.ndarray, merge: bool) -> list[tuple[int, int]]:
    pos = np.flatnonzero(b)
    if not merge or len(pos) == 0:
        return [(f, f + 1) for f in pos]
    breaks = np.flatnonzero(np.diff(pos) > 1)
    starts = np.concatenate([[pos[0]], pos[breaks + 1]])
    ends = np.concatenate([pos[breaks], [pos[-1]]]) + 1
    return list(zip(starts, ends))


def decode_gci(b, peak_signal, config: DecodeConfig = DecodeConfig(), frame_len: int = FRAME_LEN,
               sample_rate_hz: int = TARGET_RATE) -> GciMarks:
    """One mark at the most negative sample of each positive frame (or merged run of frames)."""
    b = np.asarray(b)
    x = np.asarray(peak_signal, dtype=np.float64)
    if len(x) < frame_len * len(b):
        raise ValueError("peak signal is shorter than the frame sequence")
    marks = [lo * frame_len + int(np.argmin(x[lo * frame_len:hi * frame_len]))
             for lo, hi in _regions(b, config.merge_adjacent)]
    return GciMarks(np.array(marks, dtype=np.int64), MarkSource.DETECTOR, sample_rate_hz)
