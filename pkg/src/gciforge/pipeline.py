"""End-to-end orchestration shared by the CLI and the experiment scripts.

Every stage reads and writes plain files under a corpus directory so the
stages can be run separately:

    <corpus>/manifest.tsv            synthetic or user corpus
    <corpus>/annotated.tsv           manifest pointing at EGG-derived marks
    <checkpoints>/model{1..4}.gcn, joint.gcn, *_loss.csv, split.tsv
    <detections>/<id>.gci, probs/<id>.csv
    <reports>/report.txt, report.kv, per_recording.tsv, overlays/<id>.tsv
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import _io
from .egg_annotate import (MAX_DELAY_MS, MIN_DISTANCE, REL_THRESHOLD, GciMarks, annotate_recording,
                           read_marks, write_marks)
from .eval_metrics import (compute_metrics, format_keyvalue, format_report, frame_f1, merge_reports)
from .frame_dataset import (FRAME_LEN, REPR_NAMES, FrameDataset, Manifest, ManifestRow, chunk_frames,
                            frame_and_label, frame_labels, make_representations, read_manifest,
                            split_corpus, write_manifest)
from .gci_decode import DecodeConfig, classify_frames, decode_gci
from .gci_models import (MODEL_REPR, FinalModel, TrainConfig, load_model, save_checkpoint,
                         train_joint, train_single_column)
from .signal_core import prepare_egg, prepare_speech, read_wav
from .synth import DEFAULT_MIX, gen_corpus
from .zff import ZffConfig, zff_epochs

DEFAULT_SEED = 7
SEED_ENV = "GCIFORGE_SEED"
MODEL_NAMES = ("model1", "model2", "model3", "model4", "joint")


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #

@dataclass
class Paths:
    corpus: str = "corpus"
    checkpoints: str = "checkpoints"
    detections: str = "detections"
    reports: str = "reports"


@dataclass
class SynthSettings:
    n: int = 80
    mix: tuple = DEFAULT_MIX
    duration_s: float = 0.5
    mic_delay_samples: int = 10
    max_smear_ms: float | None = None


@dataclass
class SplitSettings:
    train_fraction: float = 0.675
    val_fraction: float = 0.10


@dataclass
class AnnotateSettings:
    max_delay_ms: float = MAX_DELAY_MS
    min_distance_samples: int = MIN_DISTANCE
    rel_threshold: float = REL_THRESHOLD


@dataclass
class PipelineConfig:
    seed: int | None = None
    paths: Paths = field(default_factory=Paths)
    synth: SynthSettings = field(default_factory=SynthSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    annotate: AnnotateSettings = field(default_factory=AnnotateSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_refs: str = "annotated"  # marks used as training labels: annotated | truth
    fusion_rule: str = "product"
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    zff: ZffConfig = field(default_factory=ZffConfig)
    flip_polarity: bool = False

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get(SEED_ENV)
        if env:
            try:
                return int(env)
            except ValueError:
                raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        return DEFAULT_SEED


def _from_mapping(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _from_mapping(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None) -> PipelineConfig:
    """Defaults, overlaid with a JSON file if given. Unknown keys are errors."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None
    return _from_mapping(PipelineConfig, data, str(path))


def config_to_json(cfg: PipelineConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- #
# Per-recording work (top-level so it can run in worker processes)
# --------------------------------------------------------------------------- #

def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))  # map keeps input order


def load_prepared(wav_path, flip_polarity=False):
    speech, egg = read_wav(wav_path)
    return prepare_speech(speech, flip_polarity), (prepare_egg(egg) if egg is not None else None)


def _annotate_one(args):
    wav_path, out_path, settings, flip = args
    speech, egg = load_prepared(wav_path, flip)
    if egg is None:
        raise ValueError(f"{wav_path}: no EGG channel to annotate from")
    ann = annotate_recording(speech, egg, settings.max_delay_ms, settings.min_distance_samples,
                             settings.rel_threshold)
    write_marks(out_path, ann.marks)
    return ann.delay_samples, ann.confident, len(ann.marks)


def _frames_one(args):
    rec_id, wav_path, marks_path, flip = args
    speech, _ = load_prepared(wav_path, flip)
    reps = make_representations(speech)
    marks = read_marks(marks_path).shifted(0, len(reps))
    return frame_and_label(reps, marks, rec_id)


def _detect_one(args):
    rec_id, wav_path, out_dir, detector, model_paths, fusion, decode, zff_cfg, flip = args
    speech, _ = load_prepared(wav_path, flip)
    out_dir = Path(out_dir)
    if detector == "zff":
        marks = zff_epochs(speech, zff_cfg)
        write_marks(out_dir / f"{rec_id}.gci", marks)
        return len(marks)
    reps = make_representations(speech)
    frames = chunk_frames(reps)
    model = _load_detector(detector, model_paths, fusion)
    if detector == "proposed":
        probs = model.frame_probs(frames)
    elif detector == "joint":
        probs = model.predict(frames)
    else:
        probs = model.predict(frames[:, REPR_NAMES.index(model.repr_name)][:, None])
    marks = decode_gci(classify_frames(probs, decode.threshold), reps.get(decode.peak_signal), decode)
    lines = ["frame,start_sample,probability"]
    lines += [f"{i},{i * FRAME_LEN},{p:.9g}" for i, p in enumerate(probs)]
    _io.atomic_write_text(out_dir / "probs" / f"{rec_id}.csv", "\n".join(lines) + "\n")
    write_marks(out_dir / f"{rec_id}.gci", marks)
    return len(marks)


_MODEL_CACHE: dict = {}


def _load_detector(detector: str, model_paths: dict, fusion: str):
    """Cached model for one worker process: FinalModel, JointModel or a single column."""
    key = (detector, tuple(sorted(model_paths.items())), fusion)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE.clear()
        if detector == "proposed":
            model = FinalModel(load_model(model_paths["model1"], "single"),
                               load_model(model_paths["joint"], "joint"), fusion)
        elif detector == "joint":
            model = load_model(model_paths["joint"], "joint")
        else:
            model = load_model(model_paths[detector], "single")
        _MODEL_CACHE[key] = model
    return _MODEL_CACHE[key]


DETECTORS = ("proposed", "zff") + MODEL_NAMES


# --------------------------------------------------------------------------- #
# Stages
# --------------------------------------------------------------------------- #

def run_synth(cfg: PipelineConfig, out_dir) -> list[ManifestRow]:
    s = cfg.synth
    return gen_corpus(s.n, s.mix, cfg.resolved_seed(), out_dir, s.duration_s, s.mic_delay_samples,
                      s.max_smear_ms)


def run_annotate(cfg: PipelineConfig, corpus, jobs: int = 1) -> list[tuple]:
    """EGG-derived marks for every recording -> ``annotated/<id>.gci`` + ``annotated.tsv``."""
    corpus = Path(corpus)
    man = read_manifest(_need(corpus / "manifest.tsv", "manifest"))
    tasks = [(man.resolve(r.wav_path), corpus / "annotated" / f"{r.id}.gci", cfg.annotate,
              cfg.flip_polarity) for r in man.rows]
    results = _map(_annotate_one, tasks, jobs)
    rows = [replace(r, marks_path=f"annotated/{r.id}.gci") for r in man.rows]
    write_manifest(corpus / "annotated.tsv", rows)
    log = ["id\tdelay_samples\tconfident\tn_marks"]
    log += [f"{r.id}\t{d}\t{int(c)}\t{n}" for r, (d, c, n) in zip(man.rows, results)]
    _io.atomic_write_text(corpus / "annotate_log.tsv", "\n".join(log) + "\n")
    return results


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def reference_manifest(corpus, refs: str) -> Manifest:
    corpus = Path(corpus)
    if refs == "truth":
        return read_manifest(_need(corpus / "manifest.tsv", "manifest"))
    if refs == "annotated":
        return read_manifest(_need(corpus / "annotated.tsv", "annotated manifest (run `annotate` first)"))
    raise ValueError(f"refs must be 'annotated' or 'truth', got {refs!r}")


def corpus_split(cfg: PipelineConfig, man: Manifest) -> dict[str, list[str]]:
    tr, va, te = split_corpus(man.ids(), cfg.split.train_fraction, cfg.split.val_fraction,
                              cfg.resolved_seed())
    return {"train": tr, "val": va, "test": te}


def build_frames(cfg: PipelineConfig, man: Manifest, ids, jobs: int = 1) -> FrameDataset:
    rows = man.by_id()
    tasks = [(i, man.resolve(rows[i].wav_path), man.resolve(rows[i].marks_path), cfg.flip_polarity)
             for i in ids]
    return FrameDataset.concat(_map(_frames_one, tasks, jobs))


def run_train(cfg: PipelineConfig, corpus, ckpt_dir, only=None, jobs: int = 1, echo=None) -> dict:
    """Train Models 1-4 and the joint model; returns the TrainResult per model name."""
    ckpt_dir = Path(ckpt_dir)
    man = reference_manifest(corpus, cfg.train_refs)
    split = corpus_split(cfg, man)
    seed = cfg.resolved_seed()
    _io.atomic_write_text(ckpt_dir / "split.tsv",
                          "".join(f"{i}\t{k}\n" for k, ids in split.items() for i in ids))
    train = build_frames(cfg, man, split["train"], jobs)
    val = build_frames(cfg, man, split["val"], jobs)

    wanted = MODEL_NAMES if only is None else (only,)
    results = {}
    columns = {}
    for name in MODEL_NAMES[:4]:
        path = ckpt_dir / f"{name}.gcn"
        if name in wanted:
            log_lines = ["epoch,train_bce,val_bce"]

            def log(e, a, b, name=name, lines=log_lines):
                lines.append(f"{e},{a:.9g},{b:.9g}")
                if echo:
                    echo(f"{name} epoch {e}: train_bce={a:.5f} val_bce={b:.5f}")

            model, res = train_single_column(MODEL_REPR[name], train, val, seed, cfg=cfg.train, log=log)
            save_checkpoint(path, model)
            _io.atomic_write_text(ckpt_dir / f"{name}_loss.csv", "\n".join(log_lines) + "\n")
            columns[name] = model
            results[name] = res
    if "joint" in wanted:
        for name in ("model3", "model4"):
            if name not in columns:
                columns[name] = load_model(ckpt_dir / f"{name}.gcn", "single")
        log_lines = ["epoch,train_bce,val_bce"]

        def jlog(e, a, b):
            log_lines.append(f"{e},{a:.9g},{b:.9g}")
            if echo:
                echo(f"joint epoch {e}: train_bce={a:.5f} val_bce={b:.5f}")

        joint, res = train_joint(columns["model3"], columns["model4"], train, val, seed, cfg.train, jlog)
        save_checkpoint(ckpt_dir / "joint.gcn", joint)
        _io.atomic_write_text(ckpt_dir / "joint_loss.csv", "\n".join(log_lines) + "\n")
        results["joint"] = res
    return results


def select_ids(cfg: PipelineConfig, man: Manifest, subset: str) -> list[str]:
    if subset == "all":
        return man.ids()
    split = corpus_split(cfg, man)
    if subset not in split:
        raise ValueError(f"split must be one of all/train/val/test, got {subset!r}")
    return split[subset]


def run_detect(cfg: PipelineConfig, corpus, out_dir, detector: str = "proposed", ckpt_dir=None,
               subset: str = "test", jobs: int = 1) -> int:
    man = read_manifest(_need(Path(corpus) / "manifest.tsv", "manifest"))
    ids = select_ids(cfg, man, subset)
    paths = {}
    if detector not in DETECTORS:
        raise ValueError(f"unknown detector {detector!r}")
    if detector != "zff":
        ckpt_dir = Path(ckpt_dir if ckpt_dir is not None else cfg.paths.checkpoints)
        needed = ("model1", "joint") if detector == "proposed" else (detector,)
        paths = {n: str(_need(ckpt_dir / f"{n}.gcn", "checkpoint")) for n in needed}
        _load_detector(detector, paths, cfg.fusion_rule)  # fail early on a bad checkpoint
    rows = man.by_id()
    tasks = [(i, man.resolve(rows[i].wav_path), str(out_dir), detector, paths, cfg.fusion_rule,
              cfg.decode, cfg.zff, cfg.flip_polarity) for i in ids]
    return sum(_map(_detect_one, tasks, jobs))


def run_eval(cfg: PipelineConfig, corpus, detections: dict, report_dir, refs: str = "truth",
             subset: str = "test", per_disorder: bool = False) -> dict:
    """Score each named detection directory; writes table, key=value, per-recording rows and overlays."""
    report_dir = Path(report_dir)
    man = reference_manifest(corpus, refs)
    ids = select_ids(cfg, man, subset)
    rows = man.by_id()
    table = {}
    per_rec = ["method\tid\tlabel\tidr\tmr\tfar\tida_ms\tn_ref\tn_det"]
    overlays: dict[str, list[str]] = {i: [] for i in ids}
    for method, det_dir in detections.items():
        det_dir = Path(det_dir)
        reports = {}
        f_pred, f_true = [], []
        for i in ids:
            ref = read_marks(man.resolve(rows[i].marks_path))
            det = read_marks(_need(det_dir / f"{i}.gci", "detection file"))
            r = compute_metrics(ref, det)
            reports[i] = r
            per_rec.append(f"{method}\t{i}\t{rows[i].disorder_label}\t{r.idr:.6f}\t{r.mr:.6f}\t{r.far:.6f}\t"
                           f"{_num(r.ida_ms)}\t{r.n_ref}\t{r.n_det}")
            if not overlays[i]:
                overlays[i] += [f"ref\t{p}" for p in ref.positions]
            overlays[i] += [f"{method}\t{p}" for p in det.positions]
            n = _n_frames(det_dir, i, ref, det)
            f_true.append(frame_labels(n * FRAME_LEN, ref))
            f_pred.append(frame_labels(n * FRAME_LEN, det))
        agg = merge_reports(reports.values())
        agg.precision, agg.recall, agg.f1 = frame_f1(np.concatenate(f_pred), np.concatenate(f_true))
        table[method] = agg
        if per_disorder:
            labels = sorted({rows[i].disorder_label for i in ids})
            for lab in labels:
                sel = [reports[i] for i in ids if rows[i].disorder_label == lab]
                table[f"{method}[{lab}]"] = merge_reports(sel)
    text = format_report(table)
    _io.atomic_write_text(report_dir / "report.txt", text)
    _io.atomic_write_text(report_dir / "report.kv", format_keyvalue(table))
    _io.atomic_write_text(report_dir / "per_recording.tsv", "\n".join(per_rec) + "\n")
    for i, lines in overlays.items():
        _io.atomic_write_text(report_dir / "overlays" / f"{i}.tsv", "kind\tsample\n" + "\n".join(lines) + "\n")
    return table


def _num(x: float) -> str:
    return "n/a" if math.isnan(x) else f"{x:.6f}"


def _n_frames(det_dir: Path, rec_id: str, ref: GciMarks, det: GciMarks) -> int:
    """Frame count for the F1 scan: from the probability trace if present, else from the marks."""
    probs = det_dir / "probs" / f"{rec_id}.csv"
    if probs.exists():
        return sum(1 for _ in probs.open()) - 1
    last = max([0] + [int(m[-1]) + 1 for m in (ref.positions, det.positions) if len(m)])
    return -(-last // FRAME_LEN)


__all__ = [
    "AnnotateSettings", "DETECTORS", "MODEL_NAMES", "PipelineConfig", "Paths", "SplitSettings", "SynthSettings", "build_frames",
    "config_to_json", "corpus_split", "load_config", "reference_manifest", "run_annotate", "run_detect",
    "run_eval", "run_synth", "run_train", "select_ids", "REPR_NAMES",
]
