"""Larynx-cycle reliability/accuracy scoring and frame-level F1."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .egg_annotate import GciMarks
from .signal_core import TARGET_RATE

NA = "n/a"
POLICY_NOTE = ("# IDA = population std of timing error over identified cycles; "
               "detections outside every reference cycle are ignored")


@dataclass(frozen=True)
class CycleWindow:
    ref_index: int
    lo: float
    hi: float


def build_cycles(refs) -> list[CycleWindow]:
    """Half-distance windows; the end windows mirror their single neighbour gap."""
    r = np.asarray(refs.positions if isinstance(refs, GciMarks) else refs, dtype=np.int64)
    if len(r) < 2:
        raise ValueError("need at least 2 reference marks to build cycles")
    mids = (r[:-1] + r[1:]) / 2.0
    lo = np.concatenate([[r[0] - (r[1] - r[0]) / 2.0], mids])
    hi = np.concatenate([mids, [r[-1] + (r[-1] - r[-2]) / 2.0]])
    return [CycleWindow(int(m), float(a), float(b)) for m, a, b in zip(r, lo, hi)]


@dataclass
class EvalReport:
    n_ref: int
    n_identified: int
    n_missed: int
    n_false_alarm: int
    n_det: int
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))  # samples, identified cycles
    sample_rate_hz: int = TARGET_RATE
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None

    @property
    def idr(self) -> float:
        return 100.0 * self.n_identified / self.n_ref if self.n_ref else math.nan

    @property
    def mr(self) -> float:
        return 100.0 * self.n_missed / self.n_ref if self.n_ref else math.nan

    @property
    def far(self) -> float:
        return 100.0 * self.n_false_alarm / self.n_ref if self.n_ref else math.nan

    @property
    def ida_ms(self) -> float:
        if self.n_identified == 0:
            return math.nan
        return 1000.0 * float(np.std(self.errors)) / self.sample_rate_hz

    def merge(self, other: EvalReport) -> EvalReport:
        """Pool two reports by cycle counts (timing errors pooled, not averaged)."""
        if self.sample_rate_hz != other.sample_rate_hz:
            raise ValueError("cannot merge reports at different sample rates")
        return EvalReport(self.n_ref + other.n_ref, self.n_identified + other.n_identified,
                          self.n_missed + other.n_missed, self.n_false_alarm + other.n_false_alarm,
                          self.n_det + other.n_det, np.concatenate([self.errors, other.errors]),
                          self.sample_rate_hz)

    def as_dict(self) -> dict:
        d = {"idr": self.idr, "mr": self.mr, "far": self.far, "ida_ms": self.ida_ms,
             "n_ref": self.n_ref, "n_det": self.n_det}
        for k in ("precision", "recall", "f1"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


def merge_reports(reports) -> EvalReport:
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to merge")
    out = reports[0]
    for r in reports[1:]:
        out = out.merge(r)
    return out


def compute_metrics(refs: GciMarks, dets: GciMarks, sample_rate_hz: int = TARGET_RATE) -> EvalReport:
    cycles = build_cycles(refs)
    r = refs.positions
    d = np.asarray(dets.positions, dtype=np.int64)
    lo = np.array([c.lo for c in cycles])
    hi = np.array([c.hi for c in cycles])
    # Windows tile [lo[0], hi[-1]) so each detection lands in at most one.
    inside = (d >= lo[0]) & (d < hi[-1])
    d_in = d[inside]
    which = np.searchsorted(hi, d_in, side="right")
    counts = np.bincount(which, minlength=len(r))
    one = counts == 1
    # For windows with exactly one detection, that detection is the first one in the window.
    first = np.searchsorted(d_in, lo, side="left")
    errs = (d_in[first[one]] - r[one]).astype(np.float64)
    return EvalReport(
        n_ref=len(r), n_identified=int(one.sum()), n_missed=int((counts == 0).sum()),
        n_false_alarm=int((counts > 1).sum()), n_det=len(d),
        errors=errs, sample_rate_hz=sample_rate_hz,
    )


def frame_f1(pred_labels, true_labels) -> tuple[float, float, float]:
    p = np.asarray(pred_labels).astype(bool)
    t = np.asarray(true_labels).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


# --------------------------------------------------------------------------- #
# Formatting
# --------------------------------------------------------------------------- #

def fmt2(x: float) -> str:
    """Two decimals, half-up; NaN becomes ``n/a``."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return NA
    # repr() gives the shortest decimal that round-trips, so 0.125 stays 0.125
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_report(reports, title: str = "Method") -> str:
    """Fixed-width table: Method | IDR | MR | FAR | IDA(msec)."""
    items = list(reports.items()) if isinstance(reports, dict) else list(reports)
    if not items:
        raise ValueError("format_report needs at least one report")
    width = max(len(title), *(len(name) for name, _ in items))
    head = f"{title:<{width}} {'IDR':>7} {'MR':>7} {'FAR':>7} {'IDA(msec)':>9}"
    lines = [head]
    for name, r in items:
        lines.append(f"{name:<{width}} {fmt2(r.idr):>7} {fmt2(r.mr):>7} {fmt2(r.far):>7} {fmt2(r.ida_ms):>9}")
    return "\n".join(lines) + "\n"


def format_keyvalue(reports) -> str:
    items = list(reports.items()) if isinstance(reports, dict) else list(reports)
    lines = [POLICY_NOTE]
    for name, r in items:
        for k, v in r.as_dict().items():
            val = NA if isinstance(v, float) and math.isnan(v) else (f"{v:.6f}" if isinstance(v, float) else v)
            lines.append(f"{name}.{k}={val}")
    return "\n".join(lines) + "\n"
