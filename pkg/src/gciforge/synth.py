"""Synthetic sustained vowels with known GCIs and a matching EGG channel.

The presets are verification knobs loosely inspired by the disorder labels;
they make no claim of clinical fidelity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.special import ndtr

from .egg_annotate import GciMarks, MarkSource, write_marks
from .frame_dataset import ManifestRow, write_manifest
from .signal_core import (
    TARGET_RATE,
    IirFilter,
    Role,
    Waveform,
    lfilter_sos,
    peak_normalize,
    write_wav,
)

DISORDER_LABELS = ("N", "P", "L", "T", "C", "PV")
LABELS = DISORDER_LABELS + ("healthy",)
VOWELS = ("a", "e", "o")

FORMANTS = {
    "a": ((730.0, 1090.0, 2440.0), (60.0, 110.0, 170.0)),
    "e": ((530.0, 1840.0, 2480.0), (60.0, 110.0, 170.0)),
    "o": ((570.0, 840.0, 2410.0), (60.0, 110.0, 170.0)),
}

OPEN_QUOTIENT = 0.6
SPEED_QUOTIENT = 2.0  # opening / closing duration
CLOSURE_DROP = 0.7  # flow level at which the fold snaps shut
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class VoicePreset:
    label: str = "healthy"
    f0_hz: float = 120.0
    jitter_pct: float = 0.5
    shimmer_pct: float = 2.0
    closure_smear_ms: float = 0.0
    aspiration_snr_db: float = 40.0
    vowel: str = "a"
    mic_delay_samples: int = 10

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if not 60.0 <= self.f0_hz <= 400.0:
            raise ValueError(f"f0 {self.f0_hz} Hz outside [60, 400]")
        if self.jitter_pct < 0 or self.shimmer_pct < 0 or self.closure_smear_ms < 0:
            raise ValueError("jitter, shimmer and smear must be non-negative")
        if self.vowel not in FORMANTS:
            raise ValueError(f"unknown vowel {self.vowel!r}")
        if self.mic_delay_samples < 0:
            raise ValueError("mic delay must be non-negative")


# Per-label parameter ranges (lo, hi) drawn uniformly per recording.
PRESET_RANGES = {
    "healthy": dict(jitter_pct=(0.3, 0.6), shimmer_pct=(1.0, 2.5), closure_smear_ms=(0.0, 0.0),
                    aspiration_snr_db=(35.0, 40.0)),
    "N": dict(jitter_pct=(0.8, 1.5), shimmer_pct=(3.0, 5.0), closure_smear_ms=(0.2, 0.5),
              aspiration_snr_db=(28.0, 34.0)),
    "P": dict(jitter_pct=(1.0, 2.0), shimmer_pct=(4.0, 6.0), closure_smear_ms=(0.3, 0.6),
              aspiration_snr_db=(25.0, 30.0)),
    "L": dict(jitter_pct=(1.0, 2.0), shimmer_pct=(4.0, 7.0), closure_smear_ms=(0.4, 0.8),
              aspiration_snr_db=(22.0, 28.0)),
    "T": dict(jitter_pct=(0.8, 1.5), shimmer_pct=(3.0, 6.0), closure_smear_ms=(0.5, 1.0),
              aspiration_snr_db=(25.0, 30.0)),
    "C": dict(jitter_pct=(2.0, 3.0), shimmer_pct=(6.0, 10.0), closure_smear_ms=(0.8, 1.5),
              aspiration_snr_db=(18.0, 24.0)),
    "PV": dict(jitter_pct=(1.5, 3.0), shimmer_pct=(6.0, 9.0), closure_smear_ms=(1.0, 1.5),
               aspiration_snr_db=(15.0, 22.0)),
}
F0_RANGE_HZ = (90.0, 220.0)

DEFAULT_MIX = LABELS


@dataclass(frozen=True)
class SynthRecording:
    speech: Waveform
    egg: Waveform
    truth: GciMarks  # source timeline, before the mic delay
    preset: VoicePreset
    seed: int

    @property
    def truth_in_speech(self) -> GciMarks:
        """Truth marks on the speech timeline (shifted by the mic delay)."""
        return self.truth.shifted(self.preset.mic_delay_samples, len(self.speech))


def draw_preset(label: str, vowel: str, rng: np.random.Generator,
                mic_delay_samples: int = 10) -> VoicePreset:
    ranges = PRESET_RANGES[label]
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in sorted(ranges.items())}
    f0 = float(rng.uniform(*F0_RANGE_HZ))
    return VoicePreset(label=label, f0_hz=f0, vowel=vowel, mic_delay_samples=mic_delay_samples,
                       **params)


# --------------------------------------------------------------------------- #
# Source, tract, EGG
# --------------------------------------------------------------------------- #

def _smear_sigma(smear_ms: float, fs: int) -> float:
    return smear_ms * fs / 1000.0 / FWHM_PER_SIGMA


def _cycle_lengths(preset: VoicePreset, n_samples: int, rng) -> list[int]:
    t0 = TARGET_RATE / preset.f0_hz
    j = preset.jitter_pct / 100.0
    lengths, total = [], 0
    while True:
        t = int(round(t0 * (1.0 + j * rng.uniform(-1.0, 1.0))))
        if total + t > n_samples:
            return lengths
        lengths.append(t)
        total += t


def rosenberg_cycle(period: int, amplitude: float = 1.0) -> tuple[np.ndarray, int]:
    """One abrupt-closure Rosenberg flow pulse; returns (flow, closure index).

    Opening is a raised cosine, closing a cosine that is cut at
    ``CLOSURE_DROP`` so the flow snaps to zero at the closure instant.
    """
    t_open = int(round(OPEN_QUOTIENT * period))
    t_rise = int(round(t_open * SPEED_QUOTIENT / (1.0 + SPEED_QUOTIENT)))
    t_fall = t_open - t_rise
    n = np.arange(period, dtype=np.float64)
    g = np.zeros(period)
    g[:t_rise] = 0.5 * (1.0 - np.cos(np.pi * n[:t_rise] / t_rise))
    phi = math.acos(CLOSURE_DROP)
    g[t_rise:t_open] = np.cos(phi * (n[t_rise:t_open] - t_rise) / t_fall)
    return amplitude * g, t_open


def gen_glottal_source(preset: VoicePreset, duration_s: float, seed: int) -> tuple[np.ndarray, GciMarks]:
    """Glottal flow derivative with jitter, shimmer, closure smear and aspiration.

    Marks sit at the per-cycle minimum of the noise-free (smeared) derivative.
    """
    if duration_s < 0.2:
        raise ValueError("duration must be at least 0.2 s")
    rng = np.random.default_rng(seed)
    n_samples = int(round(duration_s * TARGET_RATE))
    lengths = _cycle_lengths(preset, n_samples, rng)
    s = preset.shimmer_pct / 100.0

    flow = np.zeros(n_samples)
    nominal = []
    start = 0
    for t in lengths:
        g, closure = rosenberg_cycle(t, 1.0 + s * rng.uniform(-1.0, 1.0))
        flow[start:start + t] = g
        nominal.append(start + closure)
        start += t

    d = np.zeros(n_samples)
    d[1:] = np.diff(flow)
    sigma = _smear_sigma(preset.closure_smear_ms, TARGET_RATE)
    if sigma > 0:
        d = gaussian_filter1d(d, sigma, mode="constant")

    marks = []
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
    for m, c0, t in zip(nominal, starts, lengths):
        lo = max(m - t // 4, 0)
        hi = min(m + t // 4 + 1, n_samples)
        if m >= n_samples:
            continue
        marks.append(lo + int(np.argmin(d[lo:hi])))
    marks = np.array(sorted(set(marks)), dtype=np.int64)

    rms = float(np.sqrt(np.mean(d ** 2)))
    noise = rng.standard_normal(n_samples) * rms * 10.0 ** (-preset.aspiration_snr_db / 20.0)
    return d + noise, GciMarks(marks, MarkSource.SYNTHETIC)


def formant_filter(vowel: str, sample_rate_hz: int = TARGET_RATE) -> IirFilter:
    """All-pole cascade of unit-DC-gain formant resonators."""
    freqs, bws = FORMANTS[vowel]
    rows = []
    for f, b in zip(freqs, bws):
        r = math.exp(-math.pi * b / sample_rate_hz)
        theta = 2 * math.pi * f / sample_rate_hz
        a1, a2 = -2 * r * math.cos(theta), r * r
        rows.append([1.0 + a1 + a2, 0.0, 0.0, 1.0, a1, a2])
    return IirFilter(np.array(rows))


def gen_vocal_tract(source, vowel: str) -> np.ndarray:
    y = lfilter_sos(formant_filter(vowel), np.asarray(source, dtype=np.float64))
    return peak_normalize(y)


def gen_egg(truth: GciMarks, preset: VoicePreset, length: int, seed: int | None = None) -> np.ndarray:
    """Inverted contact waveform: a fast drop at every closure, slow recovery.

    The closing edge is a Gaussian-CDF step centred half a sample before the
    mark (so the dEGG minimum lands on the mark), widened by the closure
    smear. The folds stay closed for 40% of the cycle, then a raised-cosine
    opening releases contact.
    """
    pos = truth.positions
    if len(pos) == 0:
        return np.zeros(length)
    n = np.arange(length, dtype=np.float64)
    sigma = max(_smear_sigma(preset.closure_smear_ms, TARGET_RATE), 0.25)
    contact = np.zeros(length)

    intervals = np.diff(pos) if len(pos) > 1 else np.array([int(TARGET_RATE / preset.f0_hz)])
    for i, m in enumerate(pos):
        period = int(intervals[min(i, len(intervals) - 1)])
        end = int(pos[i + 1]) if i + 1 < len(pos) else length
        lo = max(int(m - 6 * sigma) - 2, 0)
        closed = int(round((1.0 - OPEN_QUOTIENT) * period))
        opening = max(int(round(0.4 * OPEN_QUOTIENT * period)), 2)
        seg = n[lo:end]
        edge = ndtr((seg - (m - 0.5)) / sigma)
        t = seg - (m + closed)
        release = np.where(t <= 0, 1.0, np.where(t >= opening, 0.0,
                                                 0.5 * (1 + np.cos(np.pi * np.clip(t, 0, opening) / opening))))
        contact[lo:end] = np.maximum(contact[lo:end], edge * release)

    egg = -contact
    if seed is not None:
        rng = np.random.default_rng(seed)
        egg = egg + rng.standard_normal(length) * 10.0 ** (-50.0 / 20.0) * np.std(egg)
    return peak_normalize(egg)


def gen_recording(preset: VoicePreset, duration_s: float = 0.5, seed: int = 0) -> SynthRecording:
    ss = np.random.SeedSequence(seed)
    src_seed, egg_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    source, truth = gen_glottal_source(preset, duration_s, src_seed)
    speech = gen_vocal_tract(source, preset.vowel)
    n = len(speech)
    d = preset.mic_delay_samples
    delayed = np.concatenate([np.zeros(d), speech])[:n]
    egg = gen_egg(truth, preset, n, egg_seed)
    return SynthRecording(
        speech=Waveform(peak_normalize(delayed), TARGET_RATE, Role.SPEECH),
        egg=Waveform(egg, TARGET_RATE, Role.EGG),
        truth=truth,
        preset=preset,
        seed=seed,
    )


# --------------------------------------------------------------------------- #
# Corpus
# --------------------------------------------------------------------------- #

def recording_seeds(root_seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(root_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def plan_corpus(n_recordings: int, preset_mix=DEFAULT_MIX, root_seed: int = 7,
                mic_delay_samples: int = 10) -> list[tuple[str, VoicePreset, int]]:
    """Deterministic (id, preset, seed) plan; labels round-robin, vowels cycle."""
    if n_recordings < 3:
        raise ValueError("a corpus needs at least 3 recordings")
    mix = tuple(preset_mix)
    for label in mix:
        if label not in PRESET_RANGES:
            raise ValueError(f"unknown preset label {label!r}")
    plan = []
    for i, seed in enumerate(recording_seeds(root_seed, n_recordings)):
        label = mix[i % len(mix)]
        vowel = VOWELS[i % len(VOWELS)]
        rng = np.random.default_rng(seed)
        preset = draw_preset(label, vowel, rng, mic_delay_samples)
        plan.append((f"rec{i:03d}_{label}_{vowel}", preset, seed))
    return plan


def gen_corpus(n_recordings: int, preset_mix=DEFAULT_MIX, root_seed: int = 7, out_dir=".",
               duration_s: float = 0.5, mic_delay_samples: int = 10,
               max_smear_ms: float | None = None) -> list[ManifestRow]:
    """Write 2-channel WAVs, truth mark files and ``manifest.tsv`` under ``out_dir``.

    Truth mark files are on the speech timeline (mic delay applied).
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "marks").mkdir(parents=True, exist_ok=True)
    rows = []
    for rec_id, preset, seed in plan_corpus(n_recordings, preset_mix, root_seed, mic_delay_samples):
        if max_smear_ms is not None and preset.closure_smear_ms > max_smear_ms:
            preset = replace(preset, closure_smear_ms=max_smear_ms)
        rec = gen_recording(preset, duration_s, seed)
        wav_rel = f"wav/{rec_id}.wav"
        marks_rel = f"marks/{rec_id}.gci"
        write_wav(out / wav_rel, rec.speech, rec.egg)
        write_marks(out / marks_rel, rec.truth_in_speech)
        rows.append(ManifestRow(rec_id, wav_rel, marks_rel, preset.label, seed))
    write_manifest(out / "manifest.tsv", rows)
    return rows


def describe_preset(preset: VoicePreset) -> str:
    return (f"{preset.label}/{preset.vowel} f0={preset.f0_hz:.1f}Hz jitter={preset.jitter_pct:.2f}% "
            f"shimmer={preset.shimmer_pct:.2f}% smear={preset.closure_smear_ms:.2f}ms "
            f"snr={preset.aspiration_snr_db:.1f}dB")
