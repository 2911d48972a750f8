"""Linear prediction analysis (autocorrelation method) and LP residual."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LP_ORDER = 12
FRAME_MS = 25.0
HOP_MS = 10.0


class DegenerateFrameError(ValueError):
    """Zero-energy frame: the autocorrelation has r[0] == 0."""


class SingularFrameError(ValueError):
    """A reflection coefficient reached magnitude 1."""


@dataclass(frozen=True)
class LpcFrame:
    start_sample: int
    coefficients: np.ndarray  # a_1..a_p, predictor x[n] ~ sum a_k x[n-k]
    gain: float  # final prediction error energy E_p
    reflection: np.ndarray | None = None


def autocorrelation(frame, max_lag: int) -> np.ndarray:
    """Biased (unnormalized) autocorrelation ``r[k] = sum_n x[n] x[n+k]``."""
    x = np.asarray(frame, dtype=np.float64)
    if max_lag < 0 or len(x) <= max_lag:
        raise ValueError(f"frame of length {len(x)} too short for max_lag {max_lag}")
    n = len(x)
    return np.array([np.dot(x[: n - k], x[k:]) for k in range(max_lag + 1)])


def levinson(r, order: int) -> tuple[np.ndarray, float, np.ndarray]:
    """Levinson-Durbin recursion.

    Returns ``(a, gain, k)``: predictor coefficients solving the Toeplitz
    normal equations, the final error energy and the reflection coefficients.
    """
    r = np.asarray(r, dtype=np.float64)
    if len(r) < order + 1:
        raise ValueError(f"need {order + 1} autocorrelation lags, got {len(r)}")
    if r[0] <= 0.0:
        raise DegenerateFrameError("r[0] must be positive")

    a = np.zeros(order)
    refl = np.zeros(order)
    err = r[0]
    for i in range(order):
        acc = r[i + 1] - np.dot(a[:i], r[i:0:-1])
        k = acc / err
        if abs(k) >= 1.0:
            raise SingularFrameError(f"|reflection coefficient| = {abs(k):.6g} at order {i + 1}")
        a[:i] = a[:i] - k * a[:i][::-1]
        a[i] = k
        refl[i] = k
        err *= 1.0 - k * k
    return a, float(err), refl


def _frame_geometry(sample_rate_hz: int, frame_ms: float, hop_ms: float) -> tuple[int, int]:
    frame_len = int(round(frame_ms * sample_rate_hz / 1000.0))
    hop = int(round(hop_ms * sample_rate_hz / 1000.0))
    if frame_len <= 0 or hop <= 0:
        raise ValueError("frame and hop lengths must be positive")
    return frame_len, hop


def lp_analysis(x, order: int = LP_ORDER, frame_ms: float = FRAME_MS, hop_ms: float = HOP_MS,
                sample_rate_hz: int = 16000) -> list[LpcFrame]:
    """One LpcFrame per hop segment, each analysed over a Hamming-windowed frame
    centered on the segment (shifted inward at the signal edges).

    Degenerate or singular frames reuse the previous coefficients (zeros at
    the start).
    """
    x = np.asarray(x, dtype=np.float64)
    frame_len, hop = _frame_geometry(sample_rate_hz, frame_ms, hop_ms)
    if len(x) < frame_len:
        raise ValueError(f"signal of length {len(x)} shorter than one analysis frame ({frame_len})")

    window = np.hamming(frame_len)
    prev = LpcFrame(0, np.zeros(order), 0.0)
    frames = []
    for seg_start in range(0, len(x), hop):
        centre = seg_start + hop // 2
        start = min(max(centre - frame_len // 2, 0), len(x) - frame_len)
        r = autocorrelation(x[start:start + frame_len] * window, order)
        try:
            a, gain, refl = levinson(r, order)
            cur = LpcFrame(seg_start, a, gain, refl)
        except (DegenerateFrameError, SingularFrameError):
            cur = LpcFrame(seg_start, prev.coefficients, prev.gain, prev.reflection)
        frames.append(cur)
        prev = cur
    return frames


def inverse_filter(x, frames: list[LpcFrame], hop: int) -> np.ndarray:
    """Apply ``e[n] = x[n] - sum_k a_k x[n-k]`` segment by segment.

    Input history runs continuously across segment boundaries.
    """
    x = np.asarray(x, dtype=np.float64)
    if not frames:
        return x.copy()
    order = len(frames[0].coefficients)
    xp = np.concatenate([np.zeros(order), x])
    e = np.empty_like(x)
    for fr in frames:
        s = fr.start_sample
        t = min(s + hop, len(x))
        seg = x[s:t].copy()
        for k, ak in enumerate(fr.coefficients, start=1):
            if ak != 0.0:
                seg -= ak * xp[order + s - k: order + t - k]
        e[s:t] = seg
    return e


def lp_residual(x, order: int = LP_ORDER, frame_ms: float = FRAME_MS, hop_ms: float = HOP_MS,
                sample_rate_hz: int = 16000) -> np.ndarray:
    """LP residual of ``x`` with frame-wise coefficients; same length as ``x``."""
    frames = lp_analysis(x, order, frame_ms, hop_ms, sample_rate_hz)
    _, hop = _frame_geometry(sample_rate_hz, frame_ms, hop_ms)
    return inverse_filter(x, frames, hop)
