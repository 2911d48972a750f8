"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Sequential
from .losses import bce_loss
from .rng import SplitMix64

REL_STEP = 1e-6
# Below this magnitude both gradients are indistinguishable from the
# finite-difference noise floor (~eps_machine / h), so relative error is
# meaningless there.
NOISE_FLOOR = 1e-8


@dataclass
class BlockResult:
    name: str
    checked: int
    worst_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    passed: bool
    failed_indices: list[int] = field(default_factory=list)


@dataclass
class GradCheckReport:
    rel_tol: float
    blocks: list[BlockResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    def worst(self) -> BlockResult:
        return max(self.blocks, key=lambda b: b.worst_rel_err)

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks:
            status = "ok" if b.passed else "FAIL"
            out.append(f"{b.name:<14} n={b.checked:<5d} worst_rel_err={b.worst_rel_err:.3e} "
                       f"(idx {b.worst_index}: analytic={b.analytic:.6e} numeric={b.numeric:.6e}) {status}")
        return out


def _loss(model: Sequential, x, y, buffers: dict) -> float:
    for name, value in buffers.items():
        model.set_buffer(name, value.copy())
    p = model.forward(x)
    loss, _ = bce_loss(p, y)
    return loss


def numeric_derivative(model: Sequential, x, y, name: str, index: int, rel_step: float = REL_STEP) -> float:
    """Central difference of mean BCE for one parameter entry, batch statistics held as in grad_check."""
    model.train()
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}
    flat = model.named_params()[name].reshape(-1)
    orig = flat[index]
    h = rel_step * max(1.0, abs(orig))
    flat[index] = orig + h
    lp = _loss(model, x, y, buffers)
    flat[index] = orig - h
    lm = _loss(model, x, y, buffers)
    flat[index] = orig
    for k, v in buffers.items():
        model.set_buffer(k, v)
    return (lp - lm) / (2 * h)


def rel_error(ga, gn) -> np.ndarray:
    ga = np.asarray(ga, dtype=np.float64)
    gn = np.asarray(gn, dtype=np.float64)
    return np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-12)


def grad_check(model: Sequential, x, y, rel_tol: float = 1e-5, max_per_block: int | None = None,
               seed: int = 0, noise_floor: float = NOISE_FLOOR, corrupt: float = 1.0,
               rel_step: float = REL_STEP) -> GradCheckReport:
    """Compare analytic gradients of mean BCE against central differences.

    The model runs in train mode (batch statistics) throughout; running
    statistics are restored before every evaluation so all probes see the same
    function. With ``max_per_block`` set, larger blocks are checked on a
    seeded random subset of entries. ``corrupt`` scales the analytic gradient
    and exists only to confirm the checker can fail.
    """
    model.train()
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}

    p = model.forward(x)
    _, dp = bce_loss(p, y)
    model.backward(dp)
    analytic = {k: v.copy() * corrupt for k, v in model.named_grads().items()}

    rng = SplitMix64(seed)
    report = GradCheckReport(rel_tol=rel_tol)
    for name, theta in model.named_params().items():
        flat = theta.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_block is not None and flat.size > max_per_block:
            idx = np.sort(rng.permutation(flat.size)[:max_per_block])
        ga = analytic[name].reshape(-1)[idx]
        gn = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = _loss(model, x, y, buffers)
            flat[i] = orig - h
            lm = _loss(model, x, y, buffers)
            flat[i] = orig
            gn[j] = (lp - lm) / (2 * h)
        err = rel_error(ga, gn)
        err[np.maximum(np.abs(ga), np.abs(gn)) < noise_floor] = 0.0
        k = int(np.argmax(err))
        report.blocks.append(BlockResult(
            name=name, checked=len(idx), worst_rel_err=float(err[k]), worst_index=int(idx[k]),
            analytic=float(ga[k]), numeric=float(gn[k]), passed=bool(err[k] <= rel_tol),
            failed_indices=[int(i) for i in idx[err > rel_tol]]))

    for k, v in buffers.items():
        model.set_buffer(k, v)
    return report
