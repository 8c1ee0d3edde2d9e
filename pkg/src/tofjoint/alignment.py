"""Point-to-point ICP and rig calibration by averaging per-scene ICP results."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .geometry import PointCloud, RigidTransform
from .nnsearch import PointIndex


@dataclass(frozen=True)
class ICPConfig:
    max_iterations: int = 50
    convergence_eps: float = 1e-4  # mm change in RMS residual
    max_pair_distance: float = 100.0  # mm
    trim_fraction: float = 0.1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ContractViolation("max_iterations must be >= 1")
        if not 0 <= self.trim_fraction < 0.5:
            raise ContractViolation("trim_fraction must be in [0, 0.5)")
        if not self.max_pair_distance > 0:
            raise ContractViolation("max_pair_distance must be > 0")


@dataclass
class ICPResult:
    transform: RigidTransform
    rms_residual: float
    iterations: int
    converged: bool
    rms_history: list = field(default_factory=list)


def _as_points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)


def _check_registrable(points: np.ndarray, name: str) -> None:
    if len(points) < 3:
        raise ContractViolation(f"{name} cloud needs at least 3 points, has {len(points)}")
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise ContractViolation(f"{name} cloud is collinear")


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking ``src`` rows onto ``dst`` rows."""
    a_mean = src.mean(axis=0)
    b_mean = dst.mean(axis=0)
    h = (src - a_mean).T @ (dst - b_mean)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, b_mean - r @ a_mean)


def _correspondences(src, index, t, cfg):
    """Gated, trimmed NN pairs for ``t(src)``: (source rows, target ids, rms)."""
    ids, d2 = index.nearest_batch(t.apply(src))
    gated = np.flatnonzero(d2 <= cfg.max_pair_distance**2)
    n_keep = int(math.ceil((1.0 - cfg.trim_fraction) * len(gated)))
    order = np.lexsort((gated, d2[gated]))
    keep = np.sort(gated[order[:n_keep]])
    if len(keep) < 3:
        raise NumericalFailure(
            f"only {len(keep)} correspondences survived gating at {cfg.max_pair_distance} mm and trimming"
        )
    return keep, ids[keep], math.sqrt(math.fsum(d2[keep]) / len(keep))


def icp(source, target, init: RigidTransform | None = None, cfg: ICPConfig = ICPConfig(),
        target_index: PointIndex | None = None) -> ICPResult:
    """Align ``source`` to ``target``; the result maps source coordinates into the target frame.

    An update that would raise the trimmed RMS residual is rejected and ends the
    iteration, so the recorded residuals never increase.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    _check_registrable(src, "source")
    _check_registrable(tgt, "target")
    index = target_index or PointIndex(tgt)
    current = init or RigidTransform.identity()

    keep, ids, rms = _correspondences(src, index, current, cfg)
    history = [rms]
    converged = False
    iterations = 0
    for it in range(1, cfg.max_iterations + 1):
        candidate = kabsch(src[keep], tgt[ids])
        keep_new, ids_new, rms_new = _correspondences(src, index, candidate, cfg)
        if rms_new > rms:
            converged = True
            break
        improvement = rms - rms_new
        current, keep, ids, rms = candidate, keep_new, ids_new, rms_new
        iterations = it
        history.append(rms)
        if improvement < cfg.convergence_eps:
            converged = True
            break
    return ICPResult(current, rms, iterations, converged, history)


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    m = np.asarray(r, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def average_transforms(results) -> RigidTransform:
    """Fuse several rig estimates into one transform.

    Translation is the arithmetic mean. Rotation is the chordal quaternion
    mean: quaternions are flipped into the hemisphere of the first one and the
    principal eigenvector of the mean outer product is taken.
    Accepts :class:`ICPResult` or :class:`RigidTransform` items.
    """
    transforms = [r.transform if isinstance(r, ICPResult) else r for r in results]
    if not transforms:
        raise ContractViolation("cannot average an empty list of transforms")
    quats = np.array([rotation_to_quaternion(t.rotation) for t in transforms])
    signs = np.where(quats @ quats[0] < 0, -1.0, 1.0)
    quats *= signs[:, None]
    m = quats.T @ quats / len(quats)
    _, evecs = np.linalg.eigh(m)
    q = evecs[:, -1]
    rot = quaternion_to_rotation(q)
    # re-orthonormalize against rounding in the quaternion -> matrix map
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    trans = np.array([math.fsum(col) for col in np.array([t.translation for t in transforms]).T]) / len(transforms)
    return RigidTransform(rot, trans)


def averaged_icp(pairs, init: RigidTransform | None = None,
                 cfg: ICPConfig = ICPConfig()) -> tuple[RigidTransform, list[ICPResult]]:
    """Run ICP on each (source, target) calibration pair and average the rig transforms."""
    pairs = list(pairs)
    if not pairs:
        raise ContractViolation("averaged ICP needs at least one cloud pair")
    results = [icp(s, t, init, cfg) for s, t in pairs]
    return average_transforms(results), results
