"""gciforge command line: synth, annotate, train, detect, eval.

Exit status: 0 success, 1 operational error, 2 usage error.
Seed precedence: --seed, then the config file's "seed", then $GCIFORGE_SEED, then 7.
Other flags likewise override config-file values.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .synth import LABELS

# Missing files, bad WAVs, bad checkpoints, bad config values.
OPERATIONAL_ERRORS = (OSError, ValueError)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    p.add_argument("--seed", type=int, help="root seed (fallback: $GCIFORGE_SEED, then 7)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-recording work")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gciforge", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _common(p)
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--n", type=int, help="number of recordings (default 80)")
    p.add_argument("--mix", help=f"comma-separated preset labels, from {','.join(LABELS)}")
    p.add_argument("--duration", type=float, help="seconds per recording (default 0.5)")
    p.add_argument("--max-smear", type=float, help="cap on closure smear in ms")

    p = sub.add_parser("annotate", help="derive reference marks from the EGG channel")
    _common(p)
    p.add_argument("--corpus", help="corpus directory holding manifest.tsv")

    p = sub.add_parser("train", help="train Models 1-4 and the joint model")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--refs", choices=("annotated", "truth"), help="training labels (default annotated)")
    p.add_argument("--only", choices=pipeline.MODEL_NAMES, help="train a single model")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("detect", help="write GCI mark files for a corpus split")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--detector", choices=pipeline.DETECTORS, default="proposed",
                   help="fused model, ZFF baseline, or one stage on its own")
    p.add_argument("--checkpoints", help="checkpoint directory (learned detectors only)")
    p.add_argument("--out", help="output directory for mark files")
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--threshold", type=float)
    p.add_argument("--merge-adjacent", action="store_true", default=None)
    p.add_argument("--fusion", choices=("product", "max"))

    p = sub.add_parser("eval", help="score detections against reference marks")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--dets", action="append", required=True, metavar="NAME=DIR",
                   help="detection directory, repeatable (e.g. Proposed=dets/proposed)")
    p.add_argument("--refs", choices=("truth", "annotated"), default="truth")
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--per-disorder", action="store_true")
    p.add_argument("--out", help="report directory")
    return ap


def _config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.jobs < 1:
        raise ValueError("--jobs must be >= 1")
    return cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    s = cfg.synth
    if args.n is not None:
        s = replace(s, n=args.n)
    if args.mix:
        s = replace(s, mix=tuple(x.strip() for x in args.mix.split(",") if x.strip()))
    if args.duration is not None:
        s = replace(s, duration_s=args.duration)
    if args.max_smear is not None:
        s = replace(s, max_smear_ms=args.max_smear)
    rows = pipeline.run_synth(replace(cfg, synth=s), args.out)
    print(f"wrote {len(rows)} recordings to {args.out}")
    return 0


def cmd_annotate(args) -> int:
    cfg = _config(args)
    corpus = args.corpus or cfg.paths.corpus
    results = pipeline.run_annotate(cfg, corpus, args.jobs)
    unsure = sum(1 for _, c, _ in results if not c)
    print(f"annotated {len(results)} recordings ({unsure} with low-confidence delay)")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.refs:
        cfg = replace(cfg, train_refs=args.refs)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    corpus = args.corpus or cfg.paths.corpus
    out = args.out or cfg.paths.checkpoints
    echo = print if args.verbose else None
    results = pipeline.run_train(cfg, corpus, out, args.only, args.jobs, echo)
    for name, res in results.items():
        print(f"{name}: best epoch {res.best_epoch} of {len(res.history)}, val_bce={res.best_val:.5f}")
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    dec = cfg.decode
    if args.threshold is not None:
        dec = replace(dec, threshold=args.threshold)
    if args.merge_adjacent:
        dec = replace(dec, merge_adjacent=True)
    cfg = replace(cfg, decode=dec, fusion_rule=args.fusion or cfg.fusion_rule)
    corpus = args.corpus or cfg.paths.corpus
    out = args.out or str(Path(cfg.paths.detections) / args.detector)
    n = pipeline.run_detect(cfg, corpus, out, args.detector, args.checkpoints, args.split, args.jobs)
    print(f"wrote {n} marks to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    dets = {}
    for item in args.dets:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise _UsageError(f"--dets expects NAME=DIR, got {item!r}")
        dets[name] = path
    corpus = args.corpus or cfg.paths.corpus
    out = args.out or cfg.paths.reports
    pipeline.run_eval(cfg, corpus, dets, out, args.refs, args.split, args.per_disorder)
    sys.stdout.write((Path(out) / "report.txt").read_text())
    return 0


class _UsageError(Exception):
    pass


COMMANDS = {"synth": cmd_synth, "annotate": cmd_annotate, "train": cmd_train, "detect": cmd_detect,
            "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad usage
    try:
        return COMMANDS[args.command](args)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"gciforge: error: {e}", file=sys.stderr)
        return 2
    except OPERATIONAL_ERRORS as e:
        print(f"gciforge: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
