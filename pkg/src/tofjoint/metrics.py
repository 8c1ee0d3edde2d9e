"""Depth and normal evaluation metrics (millimeters / radians)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, EmptyOverlapError
from .geometry import CameraIntrinsics, DepthMap, NormalMap, normals_from_depth, project

CSV_FIELDS = ("abs_rel", "sq_rel_mm", "rmse_mm", "mae_mm", "normal_mae_rad", "normal_pct_20deg", "n_valid")


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    mae: float
    n_valid: int


@dataclass(frozen=True)
class NormalMetrics:
    mae_rad: float
    pct_within_20deg: float
    n_valid: int


def _mean(values) -> float:
    return math.fsum(values) / len(values)


def depth_metrics(pred: DepthMap, gt: DepthMap) -> DepthMetrics:
    """ABS = mean(|d - g| / g), SQ = mean((d - g)^2 / g), RMSE, MAE over mutually valid pixels."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"depth rasters differ in size: {pred.shape} vs {gt.shape}")
    common = pred.mask & gt.mask
    n = int(common.sum())
    if n == 0:
        raise EmptyOverlapError("prediction and ground truth share no valid pixel")
    d = pred.values[common]
    g = gt.values[common]
    diff = d - g
    sq = diff * diff
    return DepthMetrics(
        abs_rel=_mean(np.abs(diff) / g),
        sq_rel=_mean(sq / g),
        rmse=math.sqrt(_mean(sq)),
        mae=_mean(np.abs(diff)),
        n_valid=n,
    )


def normal_metrics(pred: NormalMap, gt: NormalMap, threshold_deg: float = 20.0) -> NormalMetrics:
    """Mean angular error (radians) and the fraction of pixels strictly under ``threshold_deg``.

    Inputs are expected to be unit vectors; the dot product is clamped to [-1, 1].
    """
    if pred.shape != gt.shape:
        raise ContractViolation(f"normal rasters differ in size: {pred.shape} vs {gt.shape}")
    common = pred.mask & gt.mask
    n = int(common.sum())
    if n == 0:
        raise EmptyOverlapError("prediction and ground truth share no valid normal")
    dots = np.einsum("ij,ij->i", pred.vectors[common], gt.vectors[common])
    angles = np.arccos(np.clip(dots, -1.0, 1.0))
    within = int(np.count_nonzero(angles < math.radians(threshold_deg)))
    return NormalMetrics(_mean(angles), within / n, n)


def evaluate_pair(pred_depth: DepthMap, gt_cloud, k: CameraIntrinsics,
                  window: int = 5) -> tuple[DepthMetrics, NormalMetrics]:
    """Project the ground-truth cloud onto the prediction's raster and score depth and normals.

    Normals for both sides come from the same PCA operator, so only geometry is compared.
    """
    if pred_depth.shape != k.shape:
        raise ContractViolation(f"prediction {pred_depth.shape} does not match intrinsics {k.shape}")
    gt_depth, _ = project(gt_cloud, k)
    dm = depth_metrics(pred_depth, gt_depth)
    nm = normal_metrics(normals_from_depth(pred_depth, k, window), normals_from_depth(gt_depth, k, window))
    return dm, nm


def metrics_row(dm: DepthMetrics, nm: NormalMetrics | None = None) -> dict:
    return {
        "abs_rel": dm.abs_rel,
        "sq_rel_mm": dm.sq_rel,
        "rmse_mm": dm.rmse,
        "mae_mm": dm.mae,
        "normal_mae_rad": nm.mae_rad if nm else float("nan"),
        "normal_pct_20deg": nm.pct_within_20deg if nm else float("nan"),
        "n_valid": dm.n_valid,
    }


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for row in rows:
            w.writerow([row[f] if f == "n_valid" else repr(float(row[f])) for f in CSV_FIELDS])


def format_table(row: dict) -> str:
    width = max(len(f) for f in CSV_FIELDS)
    lines = []
    for f in CSV_FIELDS:
        v = row[f]
        lines.append(f"{f:<{width}}  {v}" if f == "n_valid" else f"{f:<{width}}  {v:.6g}")
    return "\n".join(lines)

