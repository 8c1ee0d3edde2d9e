"""Analytic ray-cast scenes and corruption injectors used as test fixtures."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .geometry import CameraIntrinsics, DepthMap, NormalMap, PointCloud, RigidTransform, backproject, transform


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not (np.isfinite(self.center).all() and np.isfinite(self.radius) and self.radius > 0):
            raise ContractViolation(f"bad sphere {self}")

    def intersect(self, rays):
        c = np.asarray(self.center, dtype=np.float64)
        a = np.einsum("...i,...i->...", rays, rays)
        b = rays @ c
        cc = c @ c - self.radius**2
        disc = b * b - a * cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (b - sq) / a
        t1 = (b + sq) / a
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        t = np.where(hit, t, np.inf)
        with np.errstate(invalid="ignore"):
            normals = (rays * t[..., None] - c) / self.radius
        return t, normals


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    quaternion: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)  # (w, x, y, z)

    def __post_init__(self):
        vals = np.r_[self.center, self.half_extents, self.quaternion]
        if not np.isfinite(vals).all() or min(self.half_extents) <= 0 or np.linalg.norm(self.quaternion) == 0:
            raise ContractViolation(f"bad box {self}")

    def rotation(self) -> np.ndarray:
        w, x, y, z = np.asarray(self.quaternion, dtype=np.float64) / np.linalg.norm(self.quaternion)
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def intersect(self, rays):
        rot = self.rotation()
        h = np.asarray(self.half_extents, dtype=np.float64)
        origin = rot.T @ (-np.asarray(self.center, dtype=np.float64))
        d = rays @ rot  # rows are R^T r
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-h - origin) / d
            tb = (h - origin) / d
        # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
        parallel = d == 0
        inside = np.abs(origin) <= h
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
        tnear = lo.max(axis=-1)
        tfar = hi.min(axis=-1)
        hit = (tnear <= tfar) & (tfar > 0)
        entering = tnear > 0
        t = np.where(hit, np.where(entering, tnear, tfar), np.inf)
        axis = np.where(entering, lo.argmax(axis=-1), hi.argmin(axis=-1))
        local = np.zeros(rays.shape)
        np.put_along_axis(local, axis[..., None], 1.0, axis=-1)
        sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1))
        normals = (local * sign) @ rot.T
        return t, normals


@dataclass(frozen=True)
class Plane:
    """The plane ``normal . X = offset`` (mm)."""

    normal: tuple[float, float, float]
    offset: float

    def __post_init__(self):
        if not np.isfinite(np.r_[self.normal, self.offset]).all() or np.linalg.norm(self.normal) == 0:
            raise ContractViolation(f"bad plane {self}")

    def intersect(self, rays):
        n = np.asarray(self.normal, dtype=np.float64)
        scale = np.linalg.norm(n)
        n, d = n / scale, self.offset / scale
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = d / denom
        t = np.where((denom != 0) & (t > 0), t, np.inf)
        return t, np.broadcast_to(n, rays.shape)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    background_plane: Plane | None = None
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if len(self.primitives) < 1:
            raise ContractViolation("a scene needs at least one primitive")


@dataclass(frozen=True)
class CorruptionSpec:
    depth_noise_sigma: float = 0.0
    misalignment: RigidTransform = field(default_factory=RigidTransform.identity)
    hole_fraction: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.depth_noise_sigma >= 0:
            raise ContractViolation("depth_noise_sigma must be >= 0")
        if not 0 <= self.hole_fraction < 1:
            raise ContractViolation("hole_fraction must be in [0, 1)")


def render_depth(spec: SceneSpec, k: CameraIntrinsics) -> tuple[DepthMap, NormalMap]:
    """Ray-cast every pixel against the scene; nearest hit wins, earlier primitives win ties."""
    rays = k.rays()
    best_t = np.full(k.shape, np.inf)
    best_n = np.zeros(k.shape + (3,))
    prims = list(spec.primitives)
    if spec.background_plane is not None:
        prims.append(spec.background_plane)
    for prim in prims:
        t, n = prim.intersect(rays)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)

    mask = np.isfinite(best_t)
    best_n = best_n / np.where(mask, np.linalg.norm(best_n, axis=-1), 1.0)[..., None]
    facing = np.einsum("hwi,hwi->hw", best_n, rays)
    best_n = np.where((facing > 0)[..., None], -best_n, best_n)
    mask &= facing != 0
    best_n[~mask] = 0.0
    return DepthMap(np.where(mask, best_t, np.nan), mask), NormalMap(best_n, mask)


def render_cloud(spec: SceneSpec, k: CameraIntrinsics) -> PointCloud:
    """Back-projected scene points with their analytic normals."""
    depth, normals = render_depth(spec, k)
    return PointCloud(backproject(depth, k).points, normals.vectors[normals.mask])


def corrupt(depth: DepthMap, cloud: PointCloud, c: CorruptionSpec) -> tuple[DepthMap, PointCloud]:
    """Seeded depth noise, random holes and a rigid misalignment of the cloud.

    Noise is drawn for the whole raster in row-major order; pixels pushed to
    non-positive depth become invalid. Exactly ``round(hole_fraction * n_valid)``
    valid pixels are then masked out.
    """
    rng = np.random.default_rng(c.rng_seed)
    values = depth.filled()
    mask = depth.mask.copy()
    if c.depth_noise_sigma > 0:
        values = values + rng.normal(0.0, c.depth_noise_sigma, size=depth.shape)
        mask &= values > 0
    if c.hole_fraction > 0:
        flat = np.flatnonzero(mask)
        n_holes = int(round(c.hole_fraction * len(flat)))
        holes = rng.choice(flat, size=n_holes, replace=False)
        mask.reshape(-1)[holes] = False
    out_depth = DepthMap(np.where(mask, values, np.nan), mask)
    return out_depth, transform(cloud, c.misalignment)


def _floats(tokens, n, line):
    if len(tokens) != n:
        raise ContractViolation(f"expected {n} numbers in scene line {line!r}")
    try:
        return [float(x) for x in tokens]
    except ValueError as exc:
        raise ContractViolation(f"unparseable scene line {line!r}") from exc


def parse_scene(text: str) -> SceneSpec:
    """Parse the one-primitive-per-line scene format.

    Lines: ``sphere cx cy cz r``, ``box cx cy cz hx hy hz qw qx qy qz``,
    ``plane nx ny nz d``, ``background nx ny nz d``, ``seed N``; ``#`` starts a comment.
    """
    prims = []
    background = None
    seed = 0
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        if kind == "sphere":
            v = _floats(rest, 4, raw)
            prims.append(Sphere(tuple(v[:3]), v[3]))
        elif kind == "box":
            v = _floats(rest, 10, raw)
            prims.append(Box(tuple(v[:3]), tuple(v[3:6]), tuple(v[6:])))
        elif kind == "plane":
            v = _floats(rest, 4, raw)
            prims.append(Plane(tuple(v[:3]), v[3]))
        elif kind == "background":
            v = _floats(rest, 4, raw)
            background = Plane(tuple(v[:3]), v[3])
        elif kind == "seed":
            if len(rest) != 1:
                raise ContractViolation(f"bad seed line {raw!r}")
            try:
                seed = int(rest[0])
            except ValueError as exc:
                raise ContractViolation(f"bad seed line {raw!r}") from exc
        else:
            raise ContractViolation(f"unknown scene primitive {kind!r}")
    return SceneSpec(tuple(prims), background, seed)


def format_scene(spec: SceneSpec) -> str:
    def nums(*vals):
        return " ".join(repr(float(v)) for v in vals)

    lines = []
    for p in spec.primitives:
        if isinstance(p, Sphere):
            lines.append(f"sphere {nums(*p.center, p.radius)}")
        elif isinstance(p, Box):
            lines.append(f"box {nums(*p.center, *p.half_extents, *p.quaternion)}")
        else:
            lines.append(f"plane {nums(*p.normal, p.offset)}")
    if spec.background_plane is not None:
        bp = spec.background_plane
        lines.append(f"background {nums(*bp.normal, bp.offset)}")
    lines.append(f"seed {spec.rng_seed}")
    return "\n".join(lines) + "\n"


def read_scene(path) -> SceneSpec:
    return parse_scene(Path(path).read_text())


def write_scene(path, spec: SceneSpec) -> None:
    Path(path).write_text(format_scene(spec))


def calibration_target(rng: np.random.Generator, n: int = 900) -> PointCloud:
    """Random samples of a corner rig (board plus two walls) with a hemisphere, centered on its mean.

    The three orthogonal planes pin translation; the hemisphere breaks the
    remaining symmetries so ICP has a unique optimum. Coordinates are mm in the
    object frame.
    """
    m = n // 3
    u = rng.uniform
    board = np.column_stack([u(-150, 150, m), u(-100, 100, m), np.zeros(m)])
    back = np.column_stack([u(-150, 150, m // 2), np.full(m // 2, -100.0), u(0, 120, m // 2)])
    side = np.column_stack([np.full(m // 2, -150.0), u(-100, 100, m // 2), u(0, 120, m // 2)])
    d = rng.normal(size=(m // 2, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d[:, 2] = np.abs(d[:, 2])
    dome = np.array([60.0, 20.0, 0.0]) + 40.0 * d
    pts = np.vstack([board, back, side, dome])
    return PointCloud(pts - pts.mean(axis=0))
