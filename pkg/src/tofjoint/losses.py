"""Training losses with analytic gradients.

* reweighted smoothed l1 between predicted and reference depth, weighted per
  pixel by ``gt / (expected_error + eps)``;
* Chamfer distance (sum of squared nearest-neighbor distances, both directions);
* jittered Chamfer: the minimum over the identity and six axis shifts of the
  predicted cloud, absorbing a small residual misalignment;
* cosine normal loss, averaged over pixels.

Scalar reductions use ``math.fsum`` so values do not depend on summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EmptyOverlapError
from .geometry import CameraIntrinsics, DepthMap, NormalMap, PointCloud
from .nnsearch import PointIndex, squared_distances


@dataclass(frozen=True)
class ReweightedL1Config:
    delta: float = 20.0
    epsilon: float = 1e-3
    reduction: str = "sum"

    def __post_init__(self):
        if not (self.delta > 0 and self.epsilon > 0):
            raise ContractViolation("delta and epsilon must be > 0")
        if self.reduction not in ("sum", "mean"):
            raise ContractViolation("reduction must be 'sum' or 'mean'")


@dataclass(frozen=True, eq=False)
class ErrorMap:
    """Expected absolute depth error per pixel, mm."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or mask.shape != values.shape:
            raise ContractViolation("error map values and mask must be equal 2-D shapes")
        v = values[mask]
        if not (np.isfinite(v).all() and (v >= 0).all()):
            raise ContractViolation("valid error estimates must be finite and >= 0")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def uniform(cls, shape, value: float) -> "ErrorMap":
        return cls(np.full(shape, float(value)), np.ones(shape, dtype=bool))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class JitterConfig:
    offset: float = 10.0

    def __post_init__(self):
        if not self.offset > 0:
            raise ContractViolation("jitter offset must be > 0")

    def offsets(self) -> np.ndarray:
        """Identity first, then +x, -x, +y, -y, +z, -z; this order breaks ties."""
        o = self.offset
        return np.array([
            [0, 0, 0], [o, 0, 0], [-o, 0, 0], [0, o, 0], [0, -o, 0], [0, 0, o], [0, 0, -o],
        ], dtype=np.float64)


@dataclass
class LossReport:
    value: float
    grad: np.ndarray | None = None
    selected_jitter: np.ndarray | None = None
    terms: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the 2-D and 3-D terms.

    With ``normalize_chamfer`` the Chamfer term is divided by the number of
    predicted points, so ``chamfer=1`` means one unit per point.
    """

    l1: float = 1.0
    chamfer: float = 1.0
    normalize_chamfer: bool = True

    def __post_init__(self):
        if self.l1 < 0 or self.chamfer < 0:
            raise ContractViolation("loss weights must be >= 0")


def _points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)


def reweighted_smoothed_l1(pred: DepthMap, gt: DepthMap, err: ErrorMap,
                           cfg: ReweightedL1Config = ReweightedL1Config()) -> LossReport:
    if not (pred.shape == gt.shape == err.shape):
        raise ContractViolation(f"raster sizes differ: {pred.shape}, {gt.shape}, {err.shape}")
    common = pred.mask & gt.mask & err.mask
    n = int(common.sum())
    if n == 0:
        raise EmptyOverlapError("prediction, ground truth and error map share no valid pixel")
    d = pred.values[common]
    d_gt = gt.values[common]
    lam = d_gt / (err.values[common] + cfg.epsilon)
    r = d - d_gt
    a = np.abs(r)
    quad = a < cfg.delta
    per_pixel = np.where(quad, 0.5 * lam * (r / cfg.delta) ** 2, lam * (a / cfg.delta - 0.5))
    g = np.where(quad, lam * r / cfg.delta**2, lam * np.sign(r) / cfg.delta)
    scale = 1.0 / n if cfg.reduction == "mean" else 1.0
    grad = np.zeros(pred.shape)
    grad[common] = g * scale
    return LossReport(math.fsum(per_pixel) * scale, grad, diagnostics={"n_valid": n})


def _chamfer_at(p, q, p_index, q_index, offset):
    """Chamfer between ``p + offset`` and ``q`` with its gradient w.r.t. p."""
    ps = p + offset
    fwd_ids, fwd_d2 = q_index.nearest_batch(ps)
    bwd_ids, _ = p_index.nearest_batch(q - offset)
    bwd_d2 = squared_distances(ps[bwd_ids], q)
    value = math.fsum(fwd_d2) + math.fsum(bwd_d2)

    def grad():
        g = 2.0 * (ps - q[fwd_ids])
        np.add.at(g, bwd_ids, 2.0 * (ps[bwd_ids] - q))
        return g

    return value, grad, fwd_ids, bwd_ids


def _check_clouds(p, q):
    if len(p) == 0 or len(q) == 0:
        raise ContractViolation("Chamfer distance needs two non-empty clouds")


def chamfer(p, q, p_index: PointIndex | None = None, q_index: PointIndex | None = None) -> LossReport:
    """Sum of squared NN distances P->Q plus Q->P, gradient w.r.t. the points of P.

    Nearest-neighbor assignments are held fixed when differentiating.
    """
    p, q = _points(p), _points(q)
    _check_clouds(p, q)
    p_index = p_index or PointIndex(p)
    q_index = q_index or PointIndex(q)
    value, grad, fwd, bwd = _chamfer_at(p, q, p_index, q_index, np.zeros(3))
    return LossReport(value, grad(), np.zeros(3), diagnostics={"forward_nn": fwd, "backward_nn": bwd})


def robust_chamfer(p, q, cfg: JitterConfig = JitterConfig(),
                   p_index: PointIndex | None = None, q_index: PointIndex | None = None) -> LossReport:
    """Lowest Chamfer score over the identity and six axis shifts of P by ``cfg.offset`` mm."""
    p, q = _points(p), _points(q)
    _check_clouds(p, q)
    p_index = p_index or PointIndex(p)
    q_index = q_index or PointIndex(q)
    best = None
    scores = []
    for offset in cfg.offsets():
        res = _chamfer_at(p, q, p_index, q_index, offset)
        scores.append(res[0])
        if best is None or res[0] < best[0][0]:
            best = (res, offset)
    (value, grad, fwd, bwd), offset = best
    return LossReport(value, grad(), offset.copy(),
                      diagnostics={"scores": scores, "forward_nn": fwd, "backward_nn": bwd})


def cosine_loss(pred: NormalMap, gt: NormalMap) -> LossReport:
    """Mean over valid pixels of ``1 - cos(angle(pred, gt))``; gradient w.r.t. ``pred``."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"normal maps differ in size: {pred.shape} vs {gt.shape}")
    n1_all = pred.vectors
    norm1 = np.linalg.norm(n1_all, axis=-1)
    norm2 = np.linalg.norm(gt.vectors, axis=-1)
    both = pred.mask & gt.mask
    zero = both & ((norm1 == 0) | (norm2 == 0))
    common = both & ~zero
    n = int(common.sum())
    if n == 0:
        raise EmptyOverlapError("no common valid non-zero normals")
    n1 = n1_all[common]
    n2 = gt.vectors[common]
    l1 = norm1[common][:, None]
    l2 = norm2[common][:, None]
    cos = np.einsum("ij,ij->i", n1, n2) / (l1[:, 0] * l2[:, 0])
    g = -(n2 / (l1 * l2) - cos[:, None] * n1 / l1**2) / n
    grad = np.zeros(n1_all.shape)
    grad[common] = g
    return LossReport(math.fsum(1.0 - cos) / n, grad,
                      diagnostics={"n_valid": n, "zero_length": int(zero.sum())})


def combined_depth_loss(pred: DepthMap, gt_cloud, gt_depth: DepthMap, err: ErrorMap,
                        k: CameraIntrinsics, weights: LossWeights = LossWeights(),
                        l1_cfg: ReweightedL1Config = ReweightedL1Config(),
                        jitter: JitterConfig | None = JitterConfig(),
                        gt_index: PointIndex | None = None) -> LossReport:
    """``w1 * l1 + w2 * chamfer(backproject(pred), gt_cloud)`` with per-pixel depth gradient.

    ``jitter=None`` uses plain Chamfer. The point gradient reaches the depth
    through d(point)/dz = viewing ray of the pixel.
    """
    if pred.shape != k.shape:
        raise ContractViolation(f"prediction {pred.shape} does not match intrinsics {k.shape}")
    value = 0.0
    grad = np.zeros(pred.shape)
    terms = {"l1": 0.0, "chamfer": 0.0}
    selected = None
    if weights.l1 > 0:
        rep = reweighted_smoothed_l1(pred, gt_depth, err, l1_cfg)
        terms["l1"] = rep.value
        value += weights.l1 * rep.value
        grad += weights.l1 * rep.grad
    if weights.chamfer > 0:
        rays = k.rays()[pred.mask]
        p = rays * pred.values[pred.mask][:, None]
        q = _points(gt_cloud)
        if gt_index is None:
            gt_index = PointIndex(q)
        if jitter is None:
            rep = chamfer(p, q, q_index=gt_index)
        else:
            rep = robust_chamfer(p, q, jitter, q_index=gt_index)
        w = weights.chamfer / len(p) if weights.normalize_chamfer else weights.chamfer
        terms["chamfer"] = rep.value
        selected = None if jitter is None else rep.selected_jitter
        value += w * rep.value
        grad[pred.mask] += w * np.einsum("ij,ij->i", rep.grad, rays)
    return LossReport(value, grad, selected, terms)
