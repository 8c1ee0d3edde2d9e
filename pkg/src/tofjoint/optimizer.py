"""Depth refinement by momentum gradient descent on the combined 2-D/3-D loss.

This stands in for training a depth network: the same loss field is minimized
directly over the depth raster, so every gradient path is exercised end to end.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .geometry import CameraIntrinsics, DepthMap
from .losses import (
    ErrorMap,
    JitterConfig,
    LossWeights,
    ReweightedL1Config,
    combined_depth_loss,
)
from .nnsearch import PointIndex

log = logging.getLogger(__name__)

_JITTER_LABELS = {(0, 0, 0): "0", (1, 0, 0): "+x", (-1, 0, 0): "-x", (0, 1, 0): "+y",
                  (0, -1, 0): "-y", (0, 0, 1): "+z", (0, 0, -1): "-z"}


@dataclass(frozen=True)
class OptimizeConfig:
    steps: int = 200
    step_size: float | None = None  # None: backtracking line search on the first step
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    l1: ReweightedL1Config = field(default_factory=ReweightedL1Config)
    jitter: JitterConfig | None = field(default_factory=JitterConfig)
    max_halvings: int = 10
    initial_move_mm: float = 20.0
    log_every: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ContractViolation("step_size must be > 0")
        if not 0 <= self.momentum < 1:
            raise ContractViolation("momentum must be in [0, 1)")


@dataclass(frozen=True)
class TraceRow:
    step: int
    total: float
    l1_term: float
    chamfer_term: float
    selected_jitter: str
    step_size: float


def jitter_label(offset) -> str:
    if offset is None:
        return "none"
    key = tuple(int(np.sign(v)) for v in offset)
    return _JITTER_LABELS[key]


def _row(step, rep, alpha):
    return TraceRow(step, rep.value, rep.terms["l1"], rep.terms["chamfer"],
                    jitter_label(rep.selected_jitter), alpha)


def optimize_depth(init: DepthMap, gt_cloud, gt_depth: DepthMap, err: ErrorMap,
                   k: CameraIntrinsics, cfg: OptimizeConfig = OptimizeConfig()) -> tuple[DepthMap, list[TraceRow]]:
    """Minimize the combined loss over the valid depths of ``init``.

    Returns the refined depth and one trace row per accepted step (row 0 is the
    initial state). Every step starts from the base step size; a step that would
    raise the loss is retried with half the step size along the plain gradient
    (dropping the momentum). After ``max_halvings`` failed retries the descent
    stops. Invalid pixels are never touched.
    """
    if init.shape != k.shape:
        raise ContractViolation(f"initial depth {init.shape} does not match intrinsics {k.shape}")
    mask = init.mask
    if not mask.any():
        raise ContractViolation("initial depth has no valid pixel")
    gt_index = PointIndex(gt_cloud.points if hasattr(gt_cloud, "points") else gt_cloud)
    z0 = init.filled()

    def evaluate(z):
        if not np.all(z[mask] > 0):
            return None
        return combined_depth_loss(DepthMap(z, mask), gt_index.points, gt_depth, err, k,
                                   cfg.weights, cfg.l1, cfg.jitter, gt_index)

    z = z0.copy()
    cur = evaluate(z)
    base_alpha = cfg.step_size
    if base_alpha is None:
        base_alpha = _initial_step(z, cur, evaluate, cfg)
    alpha = base_alpha
    trace = [_row(0, cur, alpha)]
    velocity = np.zeros(np.count_nonzero(mask))

    for step in range(1, cfg.steps + 1):
        g = cur.grad[mask]
        if not g.any():
            trace.append(_row(step, cur, alpha))
            continue
        velocity = cfg.momentum * velocity + g
        direction = velocity
        alpha = base_alpha
        accepted = None
        for _ in range(cfg.max_halvings + 1):
            cand_z = z.copy()
            cand_z[mask] -= alpha * direction
            cand = evaluate(cand_z)
            if cand is not None and cand.value <= cur.value:
                accepted = cand
                break
            alpha *= 0.5
            direction = velocity = g
        if accepted is None:
            log.info("step %d: no descent after %d halvings, stopping", step, cfg.max_halvings)
            break
        z, cur = cand_z, accepted
        trace.append(_row(step, cur, alpha))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.6g (l1 %.6g, chamfer %.6g, jitter %s)", step, cur.value,
                     cur.terms["l1"], cur.terms["chamfer"], trace[-1].selected_jitter)
    return DepthMap(np.where(mask, z, np.nan), mask), trace


def _initial_step(z, rep, evaluate, cfg, c1=1e-4, max_tries=40):
    """Armijo backtracking from a step that moves the steepest pixel ``initial_move_mm``."""
    g = rep.grad[np.isfinite(z)]
    gmax = np.abs(g).max() if g.size else 0.0
    if gmax == 0:
        return 1.0
    alpha = cfg.initial_move_mm / gmax
    gg = float(g @ g)
    for _ in range(max_tries):
        cand_z = z.copy()
        valid = np.isfinite(z)
        cand_z[valid] -= alpha * g
        cand = evaluate(cand_z)
        if cand is not None and cand.value <= rep.value - c1 * alpha * gg:
            return alpha
        alpha *= 0.5
    return alpha


def write_trace_csv(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", "l1_term", "chamfer_term", "selected_jitter"])
        for r in trace:
            w.writerow([r.step, repr(r.total), repr(r.l1_term), repr(r.chamfer_term), r.selected_jitter])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
