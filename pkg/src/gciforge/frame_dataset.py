"""Input representations, 16-sample framing/labelling, corpus splits and manifests."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _io
from .egg_annotate import GciMarks
from .lp_residual import LP_ORDER, lp_residual
from .nn.rng import SplitMix64
from .signal_core import TARGET_RATE, Waveform, lowpass, peak_normalize, positive_clip

FRAME_LEN = 16
REPR_NAMES = ("LPF_S", "LPF_LPR", "PC_LPF_S", "PC_LPF_LPR")


@dataclass(frozen=True)
class RepresentationSet:
    lpf_s: np.ndarray
    lpf_lpr: np.ndarray
    pc_lpf_s: np.ndarray
    pc_lpf_lpr: np.ndarray

    def __post_init__(self):
        n = {len(self.lpf_s), len(self.lpf_lpr), len(self.pc_lpf_s), len(self.pc_lpf_lpr)}
        if len(n) != 1:
            raise ValueError("all representations must share one length")

    def __len__(self):
        return len(self.lpf_s)

    def get(self, name: str) -> np.ndarray:
        return self.stacked()[REPR_NAMES.index(name)]

    def stacked(self) -> np.ndarray:
        """Array of shape ``(4, length)`` in ``REPR_NAMES`` order."""
        return np.stack([self.lpf_s, self.lpf_lpr, self.pc_lpf_s, self.pc_lpf_lpr])


def make_representations(speech: Waveform | np.ndarray, lp_order: int = LP_ORDER) -> RepresentationSet:
    """LPF_S, LPF_LPR and their positive-clipped variants from prepared speech.

    The two low-passed signals are peak-normalized to 0.99 and the clipped
    variants are taken from the normalized signals.
    """
    if isinstance(speech, Waveform):
        if speech.sample_rate_hz != TARGET_RATE:
            raise ValueError(f"speech must be prepared at {TARGET_RATE} Hz")
        x = speech.samples
    else:
        x = np.asarray(speech, dtype=np.float64)
    lpf_s = peak_normalize(lowpass(x))
    lpf_lpr = peak_normalize(lowpass(lp_residual(x, lp_order)))
    return RepresentationSet(lpf_s, lpf_lpr, positive_clip(lpf_s), positive_clip(lpf_lpr))


@dataclass
class FrameDataset:
    frames: np.ndarray  # (N, 4, FRAME_LEN)
    labels: np.ndarray  # (N,) uint8
    recording_ids: np.ndarray  # (N,) str
    frame_len: int = FRAME_LEN

    def __len__(self):
        return len(self.labels)

    def representation(self, name: str) -> np.ndarray:
        """Frames of one representation, shaped ``(N, 1, FRAME_LEN)`` for the CNN."""
        i = REPR_NAMES.index(name)
        return self.frames[:, i:i + 1, :]

    def subset(self, ids) -> FrameDataset:
        mask = np.isin(self.recording_ids, list(ids))
        return FrameDataset(self.frames[mask], self.labels[mask], self.recording_ids[mask], self.frame_len)

    @property
    def positive_fraction(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else 0.0

    @staticmethod
    def concat(parts: list[FrameDataset]) -> FrameDataset:
        if not parts:
            return FrameDataset(np.zeros((0, len(REPR_NAMES), FRAME_LEN)), np.zeros(0, np.uint8),
                                np.zeros(0, dtype=str))
        return FrameDataset(
            np.concatenate([p.frames for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.recording_ids for p in parts]),
        )


def frame_labels(n_samples: int, marks: GciMarks, frame_len: int = FRAME_LEN) -> np.ndarray:
    n_frames = n_samples // frame_len
    labels = np.zeros(n_frames, dtype=np.uint8)
    idx = marks.positions // frame_len
    labels[idx[idx < n_frames]] = 1
    return labels


def chunk_frames(reps: RepresentationSet, frame_len: int = FRAME_LEN) -> np.ndarray:
    """``(n_frames, 4, frame_len)`` view-free copy; the trailing partial frame is dropped."""
    n_frames = len(reps) // frame_len
    frames = reps.stacked()[:, : n_frames * frame_len].reshape(len(REPR_NAMES), n_frames, frame_len)
    return np.ascontiguousarray(frames.transpose(1, 0, 2))


def frame_and_label(reps: RepresentationSet, marks: GciMarks, recording_id: str = "",
                    frame_len: int = FRAME_LEN) -> FrameDataset:
    """Non-overlapping frames; frame f is positive iff a mark lies in [16f, 16f+16)."""
    if len(marks) and marks.positions[-1] >= len(reps):
        raise ValueError("GCI marks extend beyond the signal")
    frames = chunk_frames(reps, frame_len)
    n_frames = len(frames)
    labels = frame_labels(len(reps), marks, frame_len)
    ids = np.full(n_frames, recording_id, dtype=object).astype(str)
    return FrameDataset(frames, labels, ids, frame_len)


def split_corpus(recordings, train_fraction: float = 0.675, val_fraction: float = 0.10,
                 seed: int = 7) -> tuple[list[str], list[str], list[str]]:
    """Seeded recording-level split into (train, val, test).

    Counts are ``round(n * train_fraction)`` and ``round(n * val_fraction)``;
    the remainder is test.
    """
    ids = list(recordings)
    if len(ids) < 3:
        raise ValueError("need at least 3 recordings to split")
    if not (0 < train_fraction < 1 and 0 < val_fraction < 1 and train_fraction + val_fraction < 1):
        raise ValueError("fractions must lie in (0, 1) and sum below 1")
    order = SplitMix64(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = max(1, int(round(len(ids) * train_fraction)))
    n_val = max(1, int(round(len(ids) * val_fraction)))
    if n_train + n_val >= len(ids):
        n_train = len(ids) - n_val - 1
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# --------------------------------------------------------------------------- #
# Manifest
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ManifestRow:
    id: str
    wav_path: str
    marks_path: str
    disorder_label: str = ""
    seed: int = 0


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def ids(self) -> list[str]:
        return [r.id for r in self.rows]

    def by_id(self) -> dict[str, ManifestRow]:
        return {r.id: r for r in self.rows}


def format_manifest(rows) -> str:
    return "".join(f"{r.id}\t{r.wav_path}\t{r.marks_path}\t{r.disorder_label}\t{r.seed}\n" for r in rows)


def write_manifest(path, rows) -> None:
    _io.atomic_write_text(path, format_manifest(rows))


def read_manifest(path) -> Manifest:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        rid, wav, marks, label, seed = parts
        rows.append(ManifestRow(rid, wav, marks, label, int(seed)))
    return Manifest(rows, path.parent)
