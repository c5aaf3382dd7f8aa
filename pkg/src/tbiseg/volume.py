"""Volume and mask containers, NIfTI-1 I/O and basic geometry.

Arrays are stored in canonical ``(x, y, z)`` order; an *axial slice* is a
fixed ``z`` index.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "Mask",
    "BoundingBox",
    "NiftiFormatError",
    "NiftiUnsupportedError",
    "read_nifti",
    "write_nifti",
    "read_mask",
    "crop_to_foreground",
    "uncrop",
    "resample",
    "voxel_volume_mm3",
]

Vec3 = Tuple[float, float, float]


class NiftiFormatError(ValueError):
    """Header is not a valid single-file NIfTI-1 header."""


class NiftiUnsupportedError(ValueError):
    """Valid NIfTI-1 file that uses features outside the supported subset."""


def _as_vec3(v, name: str) -> Vec3:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got {arr.shape}")
    return tuple(float(a) for a in arr)


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image with voxel spacing (mm) and origin (mm).

    Treated as immutable: no public operation writes into ``data``.
    """

    data: np.ndarray
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume data contains NaN or Inf")
        spacing = _as_vec3(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_vec3(self.origin, "origin"))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data) -> "Volume":
        """Same geometry, new voxel values."""
        return Volume(data, self.spacing, self.origin)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.data, other.data)
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-6)
        )


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary 3D grid, geometry-compatible with a :class:`Volume`."""

    data: np.ndarray
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise ValueError(f"Mask data must be 3D, got shape {raw.shape}")
        if raw.dtype != bool and not np.isin(raw, (0, 1)).all():
            raise ValueError("Mask values must be 0 or 1")
        spacing = _as_vec3(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", raw.astype(np.uint8))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_vec3(self.origin, "origin"))

    @classmethod
    def like(cls, ref, data) -> "Mask":
        return cls(data, ref.spacing, ref.origin)

    @classmethod
    def empty_like(cls, ref) -> "Mask":
        return cls(np.zeros(ref.shape, np.uint8), ref.spacing, ref.origin)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def any(self) -> bool:
        return bool(self.data.any())

    def volume_mm3(self) -> float:
        return self.count * voxel_volume_mm3(self.spacing)

    def to_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.spacing, self.origin)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; ``lower`` inclusive, ``upper`` exclusive."""

    lower: Tuple[int, int, int]
    upper: Tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(int(a) for a in self.lower))
        object.__setattr__(self, "upper", tuple(int(a) for a in self.upper))
        if any(lo < 0 or lo >= up for lo, up in zip(self.lower, self.upper)):
            raise ValueError(f"invalid bounding box {self.lower}..{self.upper}")

    @classmethod
    def full(cls, shape) -> "BoundingBox":
        return cls((0, 0, 0), tuple(shape))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(u - l for l, u in zip(self.lower, self.upper))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(l, u) for l, u in zip(self.lower, self.upper))

    def fits(self, shape) -> bool:
        return all(u <= n for u, n in zip(self.upper, shape))


def voxel_volume_mm3(spacing) -> float:
    """Volume of one voxel in mm³."""
    sx, sy, sz = _as_vec3(spacing, "spacing")
    if min(sx, sy, sz) <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    return sx * sy * sz


# ---------------------------------------------------------------------------
# NIfTI-1 (single file, uncompressed)
# ---------------------------------------------------------------------------

_HEADER_SIZE = 348
_VOX_OFFSET = 352
_MAGIC = b"n+1\x00"
# NIfTI datatype code -> numpy dtype (endianness applied at read time)
_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def _header_bytes(v: Volume) -> bytes:
    hdr = bytearray(_HEADER_SIZE)
    nx, ny, nz = v.shape
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)  # datatype float32, bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(_VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2 | 8)  # xyzt_units: mm, sec
    struct.pack_into("<hh", hdr, 252, 1, 1)  # qform_code, sform_code
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, ox, oy, oz)
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = _MAGIC
    return bytes(hdr)


def write_nifti(v, path) -> None:
    """Write a Volume (or Mask) as little-endian float32 NIfTI-1."""
    if isinstance(v, Mask):
        v = v.to_volume()
    payload = np.ascontiguousarray(v.data.astype("<f4").ravel(order="F"))
    with open(path, "wb") as fh:
        fh.write(_header_bytes(v))
        fh.write(b"\x00\x00\x00\x00")  # empty extension block
        fh.write(payload.tobytes())


def read_nifti(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 image into a Volume.

    Raises
    ------
    NiftiFormatError
        Bad ``sizeof_hdr`` or magic string, or truncated payload.
    NiftiUnsupportedError
        More than three non-singleton dimensions or a datatype other than
        uint8, int16 or float32.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than NIfTI-1 header")
    if struct.unpack_from("<i", raw, 0)[0] == _HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == _HEADER_SIZE:
        end = ">"
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is not 348")
    if raw[344:348] != _MAGIC:
        raise NiftiFormatError(f"{path}: magic {raw[344:348]!r} is not 'n+1\\0'")

    dim = struct.unpack_from(end + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"{path}: dim[0]={ndim} out of range")
    extra = dim[4 : ndim + 1]
    if ndim < 3 or any(d > 1 for d in extra):
        raise NiftiUnsupportedError(f"{path}: only 3 spatial dims supported, got dim={dim[:ndim + 1]}")
    shape = tuple(int(d) for d in dim[1:4])

    datatype = struct.unpack_from(end + "h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise NiftiUnsupportedError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(end)

    pixdim = struct.unpack_from(end + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(end + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(end + "ff", raw, 112)
    sform_code = struct.unpack_from(end + "h", raw, 254)[0]
    if sform_code > 0:
        origin = tuple(struct.unpack_from(end + "f", raw, off)[0] for off in (292, 308, 324))
    else:
        origin = struct.unpack_from(end + "3f", raw, 268)

    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise NiftiFormatError(f"{path}: payload truncated")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * np.float32(slope if slope != 0.0 else 1.0) + np.float32(inter)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    return Volume(data, spacing, origin)


def read_mask(path) -> Mask:
    v = read_nifti(path)
    return Mask(v.data > 0.5, v.spacing, v.origin)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def crop_to_foreground(v: Volume, threshold: float = 0.0):
    """Tightest box containing every voxel with value > ``threshold``.

    Returns ``(cropped, box)``. If nothing exceeds the threshold the input is
    returned with the full-grid box. The cropped volume's origin is shifted
    so that voxel positions stay put in physical space.
    """
    idx = np.nonzero(v.data > threshold)
    if idx[0].size == 0:
        return v, BoundingBox.full(v.shape)
    lower = tuple(int(i.min()) for i in idx)
    upper = tuple(int(i.max()) + 1 for i in idx)
    box = BoundingBox(lower, upper)
    origin = tuple(o + l * s for o, l, s in zip(v.origin, lower, v.spacing))
    return Volume(v.data[box.slices].copy(), v.spacing, origin), box


def uncrop(data: np.ndarray, box: BoundingBox, shape, fill=0) -> np.ndarray:
    """Paste ``data`` back into a ``shape`` grid at ``box``."""
    out = np.full(tuple(shape), fill, dtype=data.dtype)
    out[box.slices] = data
    return out


def resample(v, target_spacing, mode: str = "trilinear", shape=None):
    """Resample onto a grid with ``target_spacing``.

    Voxel 0 stays anchored at the origin and output voxel ``j`` samples input
    coordinate ``j * target / spacing``; out-of-range coordinates clamp to the
    edge. Output shape is ``round(n * spacing / target)`` (at least 1) unless
    ``shape`` is given explicitly. Masks should use ``mode="nearest"``.
    """
    target = _as_vec3(target_spacing, "target_spacing")
    if min(target) <= 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")
    if shape is None:
        shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(v.shape, v.spacing, target))
    shape = tuple(int(n) for n in shape)
    if shape == v.shape and np.allclose(target, v.spacing, rtol=0, atol=1e-9):
        return type(v)(v.data.copy(), v.spacing, v.origin)

    axes = [np.arange(n, dtype=np.float64) * t / s for n, t, s in zip(shape, target, v.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    if mode == "nearest":
        # explicit rounding avoids spline-order-0 tie behaviour at .5
        idx = [np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1) for c, n in zip(coords, v.shape)]
        out = v.data[tuple(idx)]
    else:
        out = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest")
    return type(v)(out.astype(v.data.dtype), target, v.origin)
