import dataclasses
import hashlib

import numpy as np
import pytest
from scipy.signal import find_peaks, welch

from gciforge import synth
from gciforge.egg_annotate import (MarkSource, degg, delay_representation, estimate_delay, pick_closure_peaks,
                                   read_marks)
from gciforge.frame_dataset import make_representations, read_manifest
from gciforge.signal_core import lfilter_sos, lowpass, prepare_speech, read_wav


def preset(**kw):
    base = dict(label="healthy", f0_hz=120.0, jitter_pct=0.5, shimmer_pct=2.0, closure_smear_ms=0.0,
                aspiration_snr_db=40.0, vowel="a", mic_delay_samples=10)
    base.update(kw)
    return synth.VoicePreset(**base)


def test_preset_validation():
    for bad in (dict(f0_hz=50.0), dict(jitter_pct=-1.0), dict(closure_smear_ms=-0.1), dict(label="X"),
                dict(vowel="u")):
        with pytest.raises(ValueError):
            preset(**bad)


def test_healthy_intervals_follow_f0():
    _, marks = synth.gen_glottal_source(preset(), 1.0, seed=1)
    iv = np.diff(marks.positions)
    assert np.all(np.abs(iv - 16000 / 120) <= 0.01 * 16000 / 120 + 1)
    assert abs(len(marks) - 120) <= 2
    assert marks.source is MarkSource.SYNTHETIC


def test_marks_sit_on_derivative_minima():
    src, marks = synth.gen_glottal_source(preset(aspiration_snr_db=200.0), 0.5, seed=2)
    for m in marks.positions:
        lo, hi = max(m - 20, 0), min(m + 21, len(src))
        assert lo + int(np.argmin(src[lo:hi])) == m


def test_smear_attenuates_closure_spike():
    sharp, m0 = synth.gen_glottal_source(preset(aspiration_snr_db=200.0), 0.5, seed=3)
    smeared, m2 = synth.gen_glottal_source(preset(closure_smear_ms=2.0, aspiration_snr_db=200.0), 0.5, seed=3)
    ratio = np.mean(np.abs(smeared[m2.positions])) / np.mean(np.abs(sharp[m0.positions]))
    assert ratio < 0.5


def test_short_duration_rejected():
    with pytest.raises(ValueError):
        synth.gen_glottal_source(preset(), 0.1, seed=0)


def test_vocal_tract_formants_from_white_noise():
    x = np.random.default_rng(0).normal(size=64000)
    f, p = welch(synth.gen_vocal_tract(x, "a"), fs=16000, nperseg=2048)
    peaks, _ = find_peaks(np.log(p), prominence=1.0)
    top = sorted(sorted(peaks, key=lambda i: p[i])[-3:])
    for got, want in zip(f[top], (730, 1090, 2440)):
        assert abs(got - want) <= 0.03 * want
    assert np.array_equal(synth.gen_vocal_tract(np.zeros(100), "o"), np.zeros(100))
    for v in synth.VOWELS:
        assert synth.formant_filter(v).is_stable()


def test_egg_edges_align_with_truth():
    rec = synth.gen_recording(preset(), 0.5, seed=4)
    m = pick_closure_peaks(degg(rec.egg.samples))
    assert np.array_equal(m.positions, rec.truth.positions)
    scaled = pick_closure_peaks(degg(3.7 * rec.egg.samples))
    assert np.array_equal(scaled.positions, m.positions)
    assert not np.any(synth.gen_egg(synth.GciMarks(np.array([], np.int64)), preset(), 100))


def test_recording_invariants():
    for label in synth.LABELS:
        rng = np.random.default_rng(11)
        p = synth.draw_preset(label, "e", rng)
        rec = synth.gen_recording(p, 0.5, seed=5)
        iv = np.diff(rec.truth.positions)
        j = p.jitter_pct / 100
        assert np.all(iv >= 16000 / 400 * (1 - j) - 1) and np.all(iv <= 16000 / 60 * (1 + j) + 1)
        assert len(rec.speech) == len(rec.egg) == 8000


def test_truth_on_speech_timeline():
    rec = synth.gen_recording(preset(mic_delay_samples=25), 0.5, seed=6)
    assert np.array_equal(rec.truth_in_speech.positions, rec.truth.positions + 25)


def _lpf_mean_at_truth(smear, normalized=True, n=24):
    vals = []
    for i in range(n):
        rng = np.random.default_rng(100 + i)
        p = synth.draw_preset(synth.LABELS[i % len(synth.LABELS)], synth.VOWELS[i % 3], rng, 0)
        p = dataclasses.replace(p, closure_smear_ms=smear, aspiration_snr_db=60.0)
        if normalized:
            rec = synth.gen_recording(p, 0.5, 100 + i)
            y, truth = make_representations(prepare_speech(rec.speech)).lpf_s, rec.truth
        else:
            src, truth = synth.gen_glottal_source(p, 0.5, 100 + i)
            y = lowpass(lfilter_sos(synth.formant_filter(p.vowel), src))
        vals.append(np.mean(np.abs(y[truth.positions])))
    return float(np.mean(vals))


def test_smear_knob_lowers_low_band_at_fixed_source_scale():
    # Gaussian smoothing keeps pulse area, so below ~0.5 ms it barely touches the band under 1 kHz
    levels = [_lpf_mean_at_truth(s, normalized=False) for s in (0.5, 1.0, 1.5, 2.0, 3.0)]
    assert all(a > b for a, b in zip(levels, levels[1:]))


@pytest.mark.xfail(strict=True, reason="peak normalization of the speech rescales the low band upward as smear "
                                       "removes high-frequency energy; see decisions ledger")
def test_smear_knob_lowers_normalized_lpf_s_at_marks():
    levels = [_lpf_mean_at_truth(s) for s in (0.0, 0.5, 1.0, 1.5, 2.0)]
    assert all(a > b for a, b in zip(levels, levels[1:]))


def _delay_error(label, vowel, seed, representation):
    rng = np.random.default_rng(seed)
    p = synth.draw_preset(label, vowel, rng, 10)
    rec = synth.gen_recording(p, 0.5, seed)
    marks = pick_closure_peaks(degg(rec.egg.samples))
    return p.closure_smear_ms, estimate_delay(representation(prepare_speech(rec.speech).samples), marks) - 10


def test_mic_delay_round_trip_without_smear():
    for vowel in synth.VOWELS:
        for seed in range(3):
            assert abs(_delay_error("healthy", vowel, seed, delay_representation)[1]) <= 1


@pytest.mark.xfail(strict=True, reason="smeared closures pull the residual peak a few samples early, "
                                       "beyond the +-1 sample budget; see decisions ledger")
def test_mic_delay_round_trip_up_to_1ms_smear():
    for label in ("N", "P", "L", "T"):
        for vowel in synth.VOWELS:
            smear, err = _delay_error(label, vowel, 0, delay_representation)
            assert smear <= 1.0
            assert abs(err) <= 1, (label, vowel, err)


def test_low_passed_speech_is_a_biased_delay_cue():
    # the formant ringing shifts LPF_S minima late; this is why annotation uses the residual
    errs = [_delay_error("healthy", v, s, lowpass)[1] for v in synth.VOWELS for s in range(2)]
    assert min(errs) > 1


def test_corpus_files_and_determinism(tmp_path):
    rows = synth.gen_corpus(14, root_seed=7, out_dir=tmp_path / "a")
    synth.gen_corpus(14, root_seed=7, out_dir=tmp_path / "b")
    assert {r.disorder_label for r in rows} >= set(synth.DISORDER_LABELS)
    assert {r.id.rsplit("_", 1)[1] for r in rows} == set(synth.VOWELS)
    man = read_manifest(tmp_path / "a" / "manifest.tsv")
    assert len(man.rows) == 14
    for r in man.rows:
        sp, eg = read_wav(man.resolve(r.wav_path))
        assert eg is not None and len(sp) == len(eg)
        assert len(read_marks(man.resolve(r.marks_path))) > 0

    def digest(root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(root).as_posix().encode() + p.read_bytes())
        return h.hexdigest()
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    with pytest.raises(ValueError):
        synth.gen_corpus(2, out_dir=tmp_path / "c")
