"""Pinhole camera model, depth/point-cloud conversion, normals and rigid transforms.

Conventions used throughout the package:

* depth is z-depth along the optical axis, in millimeters;
* pixel ``(u, v)`` is column ``u``, row ``v``; its (unnormalized) viewing ray is
  ``((u - cx) / fx, (v - cy) / fy, 1)``, so a pixel at depth ``z`` back-projects to
  ``z * ray``;
* normals point toward the camera, i.e. ``normal . ray < 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation

ORTHONORMAL_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ContractViolation(f"raster size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractViolation(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} raster"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def rays(self) -> np.ndarray:
        """Per-pixel unnormalized viewing rays, shape (height, width, 3), z component 1."""
        u = (np.arange(self.width, dtype=np.float64) - self.cx) / self.fx
        v = (np.arange(self.height, dtype=np.float64) - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        rays[..., 2] = 1.0
        return rays

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics for a raster ``factor`` times larger whose pixel (f*u, f*v) sees
        exactly the ray of pixel (u, v) here."""
        if factor < 1:
            raise ContractViolation("scale factor must be >= 1")
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            self.width * factor, self.height * factor,
        )


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Depth raster in mm with an explicit validity mask.

    Values under a False mask are kept but never read by losses or metrics.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or mask.shape != values.shape:
            raise ContractViolation(
                f"depth values {values.shape} and mask {mask.shape} must be equal 2-D shapes"
            )
        good = np.isfinite(values[mask]) & (values[mask] > 0)
        if not good.all():
            raise ContractViolation("valid depth values must be finite and > 0")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))

    @classmethod
    def from_array(cls, values) -> "DepthMap":
        """Wrap a raw raster, treating non-finite and non-positive entries as invalid."""
        values = np.asarray(values, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            mask = np.isfinite(values) & (values > 0)
        return cls(np.where(mask, values, np.nan), mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def filled(self, fill: float = np.nan) -> np.ndarray:
        return np.where(self.mask, self.values, fill)

    def with_values(self, values) -> "DepthMap":
        """Same mask, new values (only valid entries matter)."""
        return DepthMap(np.where(self.mask, values, np.nan), self.mask)


@dataclass(frozen=True, eq=False)
class NormalMap:
    """Per-pixel normal vectors (height, width, 3) with a validity mask.

    Construction only checks shapes; predicted normals may be unnormalized.
    :meth:`check_invariants` verifies the unit-norm and orientation rules.
    """

    vectors: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if vectors.ndim != 3 or vectors.shape[2] != 3 or mask.shape != vectors.shape[:2]:
            raise ContractViolation(
                f"normal vectors {vectors.shape} and mask {mask.shape} are inconsistent"
            )
        if not np.isfinite(vectors[mask]).all():
            raise ContractViolation("valid normals must be finite")
        object.__setattr__(self, "vectors", _readonly(vectors))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def check_invariants(self, k: CameraIntrinsics, tol: float = 1e-6) -> None:
        if self.shape != k.shape:
            raise ContractViolation(f"normal map {self.shape} does not match intrinsics {k.shape}")
        v = self.vectors[self.mask]
        norms = np.linalg.norm(v, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ContractViolation("valid normals must be unit length")
        facing = np.einsum("ij,ij->i", v, k.rays()[self.mask])
        if np.any(facing >= 0):
            raise ContractViolation("valid normals must face the camera (normal . ray < 0)")


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(points).all():
            raise ContractViolation("point coordinates must be finite")
        object.__setattr__(self, "points", _readonly(points))
        if self.normals is not None:
            normals = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if normals.shape != points.shape:
                raise ContractViolation("normals must align index-wise with points")
            if len(normals) and np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > 1e-6):
                raise ContractViolation("point normals must be unit length")
            object.__setattr__(self, "normals", _readonly(normals))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> R x + t, with t in mm."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ContractViolation("rotation must be 3x3 and translation a 3-vector")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ContractViolation("transform entries must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL or abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ContractViolation("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        r = np.eye(3) + np.sin(angle_rad) * kx + (1 - np.cos(angle_rad)) * (kx @ kx)
        return cls(r, translation)

    @classmethod
    def translation_only(cls, translation) -> "RigidTransform":
        return cls(np.eye(3), translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """``a @ b`` applies ``b`` first, then ``a``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))

    def rotation_angle_deg(self) -> float:
        # atan2 keeps full precision near 0 and 180 degrees, unlike arccos of the trace
        r = self.rotation
        s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        c = 0.5 * (np.trace(r) - 1.0)
        return float(np.degrees(np.arctan2(s, c)))

    def error_to(self, other: "RigidTransform") -> tuple[float, float]:
        """(rotation error in degrees, translation error in mm) relative to ``other``."""
        rel = RigidTransform(self.rotation @ other.rotation.T, np.zeros(3))
        return rel.rotation_angle_deg(), float(np.linalg.norm(self.translation - other.translation))


def _check_size(depth_shape, k: CameraIntrinsics, what: str = "depth") -> None:
    if tuple(depth_shape) != k.shape:
        raise ContractViolation(f"{what} raster {tuple(depth_shape)} does not match intrinsics {k.shape}")


def backproject(depth: DepthMap, k: CameraIntrinsics) -> PointCloud:
    """One point per valid pixel, in row-major pixel order."""
    _check_size(depth.shape, k)
    rays = k.rays()[depth.mask]
    return PointCloud(rays * depth.values[depth.mask][:, None])


def backproject_dense(depth: DepthMap, k: CameraIntrinsics) -> np.ndarray:
    """(height, width, 3) points with NaN at invalid pixels."""
    _check_size(depth.shape, k)
    return k.rays() * depth.filled()[..., None]


def project(cloud: PointCloud, k: CameraIntrinsics) -> tuple[DepthMap, int]:
    """Rasterize a cloud with a z-buffer.

    Pixel coordinates round half up. Collisions keep the smallest z, then the
    smallest point index. Returns the depth map and the number of points that
    fell behind the camera or outside the raster.
    """
    pts = cloud.points
    z = pts[:, 2]
    ahead = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(k.fx * pts[:, 0] / z + k.cx + 0.5)
        v = np.floor(k.fy * pts[:, 1] / z + k.cy + 0.5)
    keep = ahead & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    dropped = int(len(pts) - keep.sum())

    idx = np.flatnonzero(keep)
    pix = v[idx].astype(np.int64) * k.width + u[idx].astype(np.int64)
    order = np.lexsort((idx, z[idx], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = idx[order[first]]

    values = np.full(k.width * k.height, np.nan)
    mask = np.zeros(k.width * k.height, dtype=bool)
    values[pix_sorted[first]] = z[winners]
    mask[pix_sorted[first]] = True
    return DepthMap(values.reshape(k.shape), mask.reshape(k.shape)), dropped


def transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(t.apply(cloud.points), normals)


def neighborhoods(arr: np.ndarray, window: int, fill=np.nan) -> np.ndarray:
    """Stack every pixel's ``window x window`` neighborhood.

    ``arr`` has shape (H, W) or (H, W, C); the result has shape (H, W, window**2)
    or (H, W, window**2, C), padded with ``fill`` outside the raster. The center
    pixel sits at index ``window**2 // 2``.
    """
    if window < 1 or window % 2 == 0:
        raise ContractViolation(f"window must be odd and positive, got {window}")
    r = window // 2
    pad = [(r, r), (r, r)] + [(0, 0)] * (arr.ndim - 2)
    padded = np.pad(arr, pad, constant_values=fill)
    view = sliding_window_view(padded, (window, window), axis=(0, 1))
    # view: (H, W, [C,] window, window)
    if arr.ndim == 3:
        view = np.moveaxis(view, 2, -1)
        return view.reshape(arr.shape[0], arr.shape[1], window * window, arr.shape[2])
    return view.reshape(arr.shape[0], arr.shape[1], window * window)


def fit_local_planes(depth: DepthMap, k: CameraIntrinsics, window: int = 5):
    """Least-squares plane through each valid pixel's back-projected neighborhood.

    Returns ``(centroids, normals, valid)`` with shapes (H, W, 3), (H, W, 3), (H, W).
    A fit is valid when the center pixel is valid, at least 3 neighbors are valid
    and the neighbors are not collinear. Normals face the camera.
    """
    if window < 3 or window % 2 == 0:
        raise ContractViolation(f"window must be odd and >= 3, got {window}")
    pts = backproject_dense(depth, k)
    nb = neighborhoods(pts, window)
    nb_mask = neighborhoods(depth.mask, window, fill=False)
    count = nb_mask.sum(axis=2)

    w = nb_mask[..., None]
    safe = np.where(w, nb, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        centroid = safe.sum(axis=2) / count[..., None]
    diff = np.where(w, nb - centroid[:, :, None, :], 0.0)
    cov = np.einsum("hwki,hwkj->hwij", diff, diff)

    valid = depth.mask & (count >= 3)
    cov[~valid] = np.eye(3)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[..., :, 0]
    valid &= evals[..., 1] > 1e-12 * np.maximum(evals[..., 2], 1e-300)

    facing = np.einsum("hwi,hwi->hw", normals, k.rays())
    normals = np.where((facing > 0)[..., None], -normals, normals)
    valid &= facing != 0
    normals[~valid] = 0.0
    centroid[~valid] = 0.0
    return centroid, normals, valid


def normals_from_depth(depth: DepthMap, k: CameraIntrinsics, window: int = 5) -> NormalMap:
    """Per-pixel normal from a PCA plane fit over the ``window x window`` neighborhood."""
    _, normals, valid = fit_local_planes(depth, k, window)
    return NormalMap(normals, valid)


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle between unit vectors along the last axis, in degrees."""
    dots = np.clip(np.einsum("...i,...i->...", a, b), -1.0, 1.0)
    return np.degrees(np.arccos(dots))
