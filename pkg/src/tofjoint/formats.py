"""On-disk formats.

TFDR  depth (or any scalar) raster: b"TFDR", u32 width, u32 height, f32 row-major, NaN = invalid
TFNR  normal raster: b"TFNR", u32 width, u32 height, 3 x f32 per pixel, NaN = invalid
TFRW  raw frame: b"TFRW", u32 width, u32 height, u8 channel count (8), 2 x f64 Hz,
      then each channel as f32 row-major
PLY   binary_little_endian vertices with float x, y, z (mm) and optional nx, ny, nz
Intrinsics and rigid transforms are small text files.

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .geometry import CameraIntrinsics, DepthMap, NormalMap, PointCloud, RigidTransform
from .tofsim import RawToFFrame

_HEADER = struct.Struct("<4sII")
_F32 = np.dtype("<f4")


def _read_header(buf: bytes, magic: bytes, path) -> tuple[int, int]:
    if len(buf) < _HEADER.size:
        raise ContractViolation(f"{path}: truncated header")
    got, width, height = _HEADER.unpack_from(buf)
    if got != magic:
        raise ContractViolation(f"{path}: expected magic {magic!r}, found {got!r}")
    return width, height


def write_raster(path, values: np.ndarray) -> None:
    """Write a (H, W) scalar raster as TFDR; NaN marks invalid pixels."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ContractViolation("TFDR rasters are 2-D")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"TFDR", w, h))
        fh.write(np.ascontiguousarray(values, dtype=_F32).tobytes())


def read_raster(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h = _read_header(buf, b"TFDR", path)
    n = w * h
    if len(buf) != _HEADER.size + 4 * n:
        raise ContractViolation(f"{path}: expected {n} float32 values")
    return np.frombuffer(buf, dtype=_F32, offset=_HEADER.size).reshape(h, w).astype(np.float64)


def write_depth(path, depth: DepthMap) -> None:
    write_raster(path, depth.filled(np.nan))


def read_depth(path) -> DepthMap:
    return DepthMap.from_array(read_raster(path))


def write_normals(path, normals: NormalMap) -> None:
    h, w = normals.shape
    data = np.where(normals.mask[..., None], normals.vectors, np.nan)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"TFNR", w, h))
        fh.write(np.ascontiguousarray(data, dtype=_F32).tobytes())


def read_normals(path) -> NormalMap:
    buf = Path(path).read_bytes()
    w, h = _read_header(buf, b"TFNR", path)
    n = w * h * 3
    if len(buf) != _HEADER.size + 4 * n:
        raise ContractViolation(f"{path}: expected {n} float32 values")
    v = np.frombuffer(buf, dtype=_F32, offset=_HEADER.size).reshape(h, w, 3).astype(np.float64)
    mask = np.isfinite(v).all(axis=2)
    return NormalMap(np.where(mask[..., None], v, 0.0), mask)


_RAW_EXTRA = struct.Struct("<Bdd")


def write_raw(path, frame: RawToFFrame) -> None:
    h, w = frame.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"TFRW", w, h))
        fh.write(_RAW_EXTRA.pack(8, *frame.freqs))
        fh.write(np.ascontiguousarray(frame.channels, dtype=_F32).tobytes())


def read_raw(path) -> RawToFFrame:
    buf = Path(path).read_bytes()
    w, h = _read_header(buf, b"TFRW", path)
    if len(buf) < _HEADER.size + _RAW_EXTRA.size:
        raise ContractViolation(f"{path}: truncated header")
    count, f1, f2 = _RAW_EXTRA.unpack_from(buf, _HEADER.size)
    if count != 8:
        raise ContractViolation(f"{path}: expected 8 channels, header says {count}")
    offset = _HEADER.size + _RAW_EXTRA.size
    if len(buf) != offset + 4 * 8 * w * h:
        raise ContractViolation(f"{path}: channel data has the wrong length")
    ch = np.frombuffer(buf, dtype=_F32, offset=offset).reshape(8, h, w).astype(np.float64)
    return RawToFFrame(ch, (f1, f2))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, cloud: PointCloud) -> None:
    names = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        cols.append(cloud.normals)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    data = np.ascontiguousarray(np.hstack(cols), dtype=_F32)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> PointCloud:
    """Read the vertex element of a binary little-endian PLY (scalar properties only)."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise ContractViolation(f"{path}: not a PLY file")
    lines = buf[:end].decode("ascii").splitlines()
    body = buf[end + len(b"end_header\n"):]
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list" or not elements:
                raise ContractViolation(f"{path}: unsupported PLY property {line!r}")
            elements[-1][2].append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise ContractViolation(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
    if not elements or elements[0][0] != "vertex":
        raise ContractViolation(f"{path}: PLY must start with a vertex element")
    _, count, props = elements[0]
    dtype = np.dtype(props)
    if len(body) < count * dtype.itemsize:
        raise ContractViolation(f"{path}: truncated vertex data")
    v = np.frombuffer(body, dtype=dtype, count=count)
    names = dtype.names
    if not {"x", "y", "z"} <= set(names):
        raise ContractViolation(f"{path}: vertices need x, y, z")
    pts = np.column_stack([v[c].astype(np.float64) for c in ("x", "y", "z")])
    normals = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.column_stack([v[c].astype(np.float64) for c in ("nx", "ny", "nz")])
    return PointCloud(pts, normals)


def write_intrinsics(path, k: CameraIntrinsics) -> None:
    Path(path).write_text(
        f"fx = {k.fx!r}\nfy = {k.fy!r}\ncx = {k.cx!r}\ncy = {k.cy!r}\n"
        f"width = {k.width}\nheight = {k.height}\n"
    )


def read_intrinsics(path) -> CameraIntrinsics:
    vals = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContractViolation(f"{path}: expected 'key = value', got {raw!r}")
        vals[key.strip()] = value.strip()
    missing = {"fx", "fy", "cx", "cy", "width", "height"} - vals.keys()
    if missing:
        raise ContractViolation(f"{path}: missing intrinsics {sorted(missing)}")
    try:
        return CameraIntrinsics(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]),
                                int(vals["width"]), int(vals["height"]))
    except ValueError as exc:
        raise ContractViolation(f"{path}: {exc}") from exc


def write_transform(path, t: RigidTransform, rms: float | None = None, scenes: int | None = None) -> None:
    lines = []
    if rms is not None:
        lines.append(f"# rms_residual_mm = {rms!r}")
    if scenes is not None:
        lines.append(f"# scenes = {scenes}")
    for row in t.rotation:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append(" ".join(repr(float(x)) for x in t.translation))
    Path(path).write_text("\n".join(lines) + "\n")


def read_transform(path) -> RigidTransform:
    nums = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            try:
                nums.extend(float(x) for x in line.split())
            except ValueError as exc:
                raise ContractViolation(f"{path}: {exc}") from exc
    if len(nums) != 12:
        raise ContractViolation(f"{path}: expected 12 numbers, found {len(nums)}")
    return RigidTransform(np.array(nums[:9]).reshape(3, 3), nums[9:])
