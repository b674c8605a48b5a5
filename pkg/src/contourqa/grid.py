"""Voxel grids, world/voxel coordinate algebra, trilinear sampling and NIfTI-1 I/O.

Arrays are indexed ``data[i, j, k]`` with ``i`` along world x.  On disk the
data is written x-fastest (Fortran order), which is what NIfTI expects.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GridError(ValueError):
    pass


class NiftiError(ValueError):
    pass


def _as_triple(values, name: str) -> tuple[float, float, float]:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise GridError(f"{name} must have 3 components, got {len(out)}")
    return out


@dataclass(frozen=True, eq=False)
class _Grid:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if self.data.ndim != 3:
            raise GridError(f"data must be 3D, got shape {self.data.shape}")
        if any(n < 2 for n in self.data.shape):
            raise GridError(f"dims must all be >= 2, got {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise GridError(f"spacing must be positive, got {self.spacing}")
        self.data.flags.writeable = False

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def voxel_to_world(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + index * np.asarray(self.spacing)

    def world_to_voxel(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=np.float64)
        return (point - np.asarray(self.origin)) / np.asarray(self.spacing)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space bounding box of the voxel centers."""
        lo = np.asarray(self.origin)
        return lo, self.voxel_to_world(np.asarray(self.dims) - 1)

    def grid_mismatch(self, other: "_Grid") -> str | None:
        """Name of the first metadata field that differs, or None."""
        if self.dims != other.dims:
            return "dims"
        if self.spacing != other.spacing:
            return "spacing"
        if self.origin != other.origin:
            return "origin"
        return None

    def world_coordinates(self) -> np.ndarray:
        """(nx, ny, nz, 3) array of voxel-center world positions."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class Volume(_Grid):
    """Scalar field on an axis-aligned grid (CT in HU, or distances in mm)."""

    def __post_init__(self):
        object.__setattr__(self, "data", np.array(self.data, dtype=np.float32))
        super().__post_init__()

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class BinaryMask(_Grid):
    """Organ membership, one boolean per voxel."""

    def __post_init__(self):
        object.__setattr__(self, "data", np.array(self.data, dtype=bool))
        super().__post_init__()

    @property
    def count(self) -> int:
        return int(self.data.sum())


# -- sampling ---------------------------------------------------------------

def trilinear_sample_many(vol: Volume, points) -> np.ndarray:
    """Trilinear interpolation at an (n, 3) array of world points.

    Raises GridError naming the axis if any point lies outside the box
    spanned by the voxel centers.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx = vol.world_to_voxel(pts)
    hi = np.asarray(vol.dims) - 1
    tol = 1e-9
    for axis, name in enumerate("xyz"):
        bad = (idx[:, axis] < -tol) | (idx[:, axis] > hi[axis] + tol)
        if bad.any():
            n = int(np.argmax(bad))
            raise GridError(
                f"point {n} out of bounds along {name} axis "
                f"(voxel coordinate {idx[n, axis]:.4f}, valid [0, {hi[axis]}])"
            )
    idx = np.clip(idx, 0, hi)
    base = np.minimum(np.floor(idx).astype(np.int64), hi - 1)
    frac = idx - base
    data = vol.data
    out = np.zeros(len(pts), dtype=np.float64)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                v = data[base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz].astype(np.float64)
                out += wx * wy * wz * v
    return out


def trilinear_sample(vol: Volume, p) -> float:
    return float(trilinear_sample_many(vol, np.asarray(p, dtype=np.float64)[None])[0])


# -- NIfTI-1 ----------------------------------------------------------------

_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_HEADER_SIZE = 348
_VOX_OFFSET = 352


def save_nifti(vol: Volume | BinaryMask, path) -> None:
    """Write a single-file uncompressed little-endian NIfTI-1 image."""
    path = Path(path)
    if isinstance(vol, BinaryMask):
        code, arr = 2, vol.data.astype("<u1")
    else:
        code, arr = 16, vol.data.astype("<f4")
    dtype = _DTYPES[code]
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin

    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 1, 1)  # qform_code, sform_code
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, ox, oy, oz)
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"

    try:
        with open(path, "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(b"\x00\x00\x00\x00")  # no extensions
            fh.write(arr.tobytes(order="F"))
    except OSError as exc:
        raise OSError(f"failed to write NIfTI file {path}: {exc}") from exc


def load_nifti(path, mask: bool | None = None) -> Volume | BinaryMask:
    """Read a NIfTI-1 file written by `save_nifti` or any conforming tool.

    ``mask=None`` returns a BinaryMask for uint8 data and a Volume otherwise.
    Only axis-aligned affines with positive scaling are accepted.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise NiftiError(f"{path}: compressed NIfTI (.nii.gz) is not supported")
    if len(raw) < _HEADER_SIZE:
        raise NiftiError(f"{path}: file too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == _HEADER_SIZE:
            raise NiftiError(f"{path}: sizeof_hdr indicates big-endian data, unsupported")
        raise NiftiError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise NiftiError(f"{path}: magic is {magic!r}, expected single-file 'n+1'")

    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] < 3 or any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise NiftiError(f"{path}: dim {dim} is not a single 3D volume")
    shape = tuple(int(d) for d in dim[1:4])
    code, _bitpix = struct.unpack_from("<hh", raw, 70)
    if code not in _DTYPES:
        raise NiftiError(f"{path}: datatype code {code} unsupported (need 2, 4 or 16)")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    qform_code, sform_code = struct.unpack_from("<hh", raw, 252)

    if sform_code > 0:
        srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)
        lin = srow[:, :3]
        if np.any(lin[~np.eye(3, dtype=bool)] != 0):
            raise NiftiError(f"{path}: non-axis-aligned affine in srow_x/srow_y/srow_z")
        spacing = tuple(np.diag(lin))
        origin = tuple(srow[:, 3])
    elif qform_code > 0:
        qb, qc, qd, qx, qy, qz = struct.unpack_from("<6f", raw, 256)
        if qb or qc or qd or pixdim[0] < 0:
            raise NiftiError(f"{path}: non-axis-aligned affine in quatern_b/c/d (qform)")
        spacing = tuple(pixdim[1:4])
        origin = (qx, qy, qz)
    else:
        spacing = tuple(pixdim[1:4])
        origin = (0.0, 0.0, 0.0)
    if any(s <= 0 for s in spacing):
        raise NiftiError(f"{path}: affine scaling {spacing} must be positive (no flips)")

    dtype = _DTYPES[code]
    start = int(vox_offset)
    count = shape[0] * shape[1] * shape[2]
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(shape, order="F")

    if mask is None:
        mask = code == 2
    if mask:
        return BinaryMask(arr != 0, spacing, origin)
    data = arr.astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * np.float32(slope if slope else 1.0) + np.float32(inter)
    return Volume(data, spacing, origin)
