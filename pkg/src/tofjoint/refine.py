"""Joint depth/normal refinement and the plane-residual error-map heuristic.

Depth-to-normal is a local PCA plane fit. Normal-to-depth intersects each
pixel's viewing ray with the tangent planes of its neighbors (using the
pixel's own normal) and averages the proposals with normal-affinity weights.
Every pass reads only the previous iteration's rasters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    NormalMap,
    backproject_dense,
    fit_local_planes,
    neighborhoods,
    normals_from_depth,
)
from .losses import ErrorMap

GRAZING_EPS = 1e-6
MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 3
    window: int = 5
    normal_affinity_gamma: float = 2.0
    blend: float = 0.5

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        if self.window < 3 or self.window % 2 == 0:
            raise ContractViolation(f"window must be odd and >= 3, got {self.window}")
        if not 0 < self.blend <= 1:
            raise ContractViolation("blend must be in (0, 1]")
        if self.normal_affinity_gamma < 0:
            raise ContractViolation("normal_affinity_gamma must be >= 0")


def depth_to_normal(depth: DepthMap, k: CameraIntrinsics, cfg: RefineConfig = RefineConfig()) -> NormalMap:
    return normals_from_depth(depth, k, cfg.window)


def normal_to_depth(depth: DepthMap, normals: NormalMap, k: CameraIntrinsics,
                    cfg: RefineConfig = RefineConfig()) -> DepthMap:
    """One Jacobi pass of plane-ray intersection smoothing.

    Neighbor ``q`` proposes ``(n_p . X_q) / (n_p . r_p)`` for pixel ``p``, weighted
    by ``max(0, n_p . n_q) ** gamma``. The pixel itself does not vote. Proposals
    that are non-finite or non-positive are dropped; pixels left without weight
    or viewed at grazing incidence keep their depth.
    """
    if depth.shape != k.shape or normals.shape != k.shape:
        raise ContractViolation("depth, normals and intrinsics must share one raster size")
    w = cfg.window
    center = (w * w) // 2
    rays = k.rays()
    pts = backproject_dense(depth, k)
    n = np.where(normals.mask[..., None], normals.vectors, 0.0)

    nb_pts = neighborhoods(pts, w)
    nb_n = neighborhoods(n, w, fill=0.0)
    nb_ok = neighborhoods(depth.mask & normals.mask, w, fill=False)
    nb_ok[:, :, center] = False

    denom = np.einsum("hwi,hwi->hw", n, rays)
    usable = depth.mask & normals.mask & (np.abs(denom) >= GRAZING_EPS)
    safe_denom = np.where(usable, denom, 1.0)
    with np.errstate(invalid="ignore"):
        proposals = np.einsum("hwi,hwki->hwk", n, nb_pts) / safe_denom[..., None]
    affinity = np.maximum(np.einsum("hwi,hwki->hwk", n, nb_n), 0.0) ** cfg.normal_affinity_gamma
    ok = nb_ok & np.isfinite(proposals) & (proposals > 0)
    weights = np.where(ok, affinity, 0.0)
    wsum = weights.sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        z_hat = np.where(ok, weights * proposals, 0.0).sum(axis=2) / wsum

    update = usable & (wsum > 0)
    z = depth.filled()
    new = np.where(update, (1.0 - cfg.blend) * z + cfg.blend * z_hat, z)
    return DepthMap(np.where(depth.mask, new, np.nan), depth.mask)


def _unit(vectors):
    norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return np.divide(vectors, norm, out=np.zeros_like(vectors), where=norm > 0)


def joint_refine(depth: DepthMap, normals: NormalMap, k: CameraIntrinsics,
                 cfg: RefineConfig = RefineConfig()) -> tuple[DepthMap, NormalMap]:
    """Alternate normal-to-depth and a blended depth-to-normal update ``cfg.iterations`` times."""
    vec = _unit(normals.vectors)
    mask = normals.mask & (np.linalg.norm(normals.vectors, axis=-1) > 0)
    current = NormalMap(np.where(mask[..., None], vec, 0.0), mask)
    for _ in range(cfg.iterations):
        depth = normal_to_depth(depth, current, k, cfg)
        est = depth_to_normal(depth, k, cfg)
        both = current.mask & est.mask
        mixed = _unit((1.0 - cfg.blend) * current.vectors + cfg.blend * est.vectors)
        degenerate = both & (np.linalg.norm(mixed, axis=-1) == 0)
        mixed[degenerate] = est.vectors[degenerate]
        vectors = np.where(both[..., None], mixed,
                           np.where(current.mask[..., None], current.vectors, est.vectors))
        new_mask = current.mask | est.mask
        current = NormalMap(np.where(new_mask[..., None], vectors, 0.0), new_mask)
    return depth, current


def estimate_error_map(depth: DepthMap, k: CameraIntrinsics, window: int = 5, floor: float = 0.1) -> ErrorMap:
    """Robust local depth spread: 1.4826 * MAD of neighbor residuals from the fitted window plane.

    Residuals are measured along each neighbor's viewing ray. Values are floored
    at ``floor`` mm; pixels without a plane fit are invalid.
    """
    centroid, normal, valid = fit_local_planes(depth, k, window)
    rays = k.rays()
    nb_rays = neighborhoods(rays, window)
    nb_z = neighborhoods(depth.filled(), window)
    nb_ok = neighborhoods(depth.mask, window, fill=False) & valid[..., None]

    offset = np.einsum("hwi,hwi->hw", normal, centroid)
    denom = np.einsum("hwi,hwki->hwk", normal, nb_rays)
    with np.errstate(invalid="ignore", divide="ignore"):
        residual = nb_z - offset[..., None] / denom
    residual = np.where(nb_ok & np.isfinite(residual), residual, np.nan)
    valid &= np.isfinite(residual).sum(axis=2) >= 3

    res = residual[valid]
    med = np.nanmedian(res, axis=1)
    mad = np.nanmedian(np.abs(res - med[:, None]), axis=1)
    values = np.full(depth.shape, np.nan)
    values[valid] = np.maximum(MAD_TO_SIGMA * mad, floor)
    return ErrorMap(np.where(valid, values, 0.0), valid)
