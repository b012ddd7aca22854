"""3-D volume container and its on-disk format.

A volume file is: 8-byte magic ``VOXW0001``, three little-endian uint32
dims (nx, ny, nz), then nx*ny*nz little-endian float32 voxels with x
varying fastest (flat index = x + nx*(y + ny*z)).

Axis convention throughout the package: axis 0 = x = sagittal,
axis 1 = y = coronal, axis 2 = z = axial. In memory a volume is a
C-contiguous (nx, ny, nz) float32 array; the x-fastest disk order is
produced with a Fortran-order ravel at write time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    MissingInputError,
    ValidationError,
    VoxwDimError,
    VoxwMagicError,
    VoxwTruncatedError,
)

MAGIC = b"VOXW0001"
AXES = ("sagittal", "coronal", "axial")

# refuse dims whose payload would exceed 8 GiB; guards against garbage headers
_MAX_VOXELS = 2**31


@dataclass(frozen=True)
class Volume3D:
    """Dense scalar field on a 3-D grid, float32, all values finite."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise ValidationError("volume values must be a 3-d array")
        if v.dtype != np.float32:
            object.__setattr__(self, "values", v.astype(np.float32))
            v = self.values
        if v.size == 0:
            raise ValidationError("volume must have at least one voxel per axis")
        if not np.isfinite(v).all():
            raise ValidationError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)


@dataclass(frozen=True)
class BinaryMask:
    """Boolean region on the same grid as the volumes it annotates."""

    bits: np.ndarray

    def __post_init__(self):
        b = self.bits
        if not isinstance(b, np.ndarray) or b.ndim != 3:
            raise ValidationError("mask bits must be a 3-d array")
        if b.dtype != np.bool_:
            object.__setattr__(self, "bits", b.astype(np.bool_))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.bits.shape)

    @property
    def count(self) -> int:
        return int(self.bits.sum())


def write_volume(vol: Volume3D, path: str | Path) -> None:
    """Serialize a volume; writing then reading is bit-exact."""
    nx, ny, nz = vol.dims
    header = MAGIC + struct.pack("<III", nx, ny, nz)
    payload = np.asarray(vol.values, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path: str | Path) -> Volume3D:
    """Parse a volume file, with distinct errors for each way it can be bad."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"volume file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise VoxwMagicError(f"{path}: bad magic, not a volume file")
    if len(raw) < 20:
        raise VoxwTruncatedError(f"{path}: header truncated")
    nx, ny, nz = struct.unpack("<III", raw[8:20])
    if nx == 0 or ny == 0 or nz == 0:
        raise VoxwDimError(f"{path}: zero dimension ({nx}, {ny}, {nz})")
    n = nx * ny * nz
    if n > _MAX_VOXELS:
        raise VoxwDimError(f"{path}: dims ({nx}, {ny}, {nz}) overflow the payload limit")
    expected = 20 + 4 * n
    if len(raw) < expected:
        raise VoxwTruncatedError(
            f"{path}: payload truncated ({len(raw) - 20} of {4 * n} bytes)"
        )
    if len(raw) > expected:
        raise VoxwTruncatedError(f"{path}: {len(raw) - expected} trailing bytes")
    flat = np.frombuffer(raw, dtype="<f4", count=n, offset=20)
    values = np.ascontiguousarray(flat.reshape((nx, ny, nz), order="F"))
    if not np.isfinite(values).all():
        raise ValidationError(f"{path}: volume contains non-finite values")
    return Volume3D(values)


def read_volume_dims(path: str | Path) -> tuple[int, int, int]:
    """Read just the header; cheap existence/shape validation."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"volume file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(20)
    if len(head) < 8 or head[:8] != MAGIC:
        raise VoxwMagicError(f"{path}: bad magic, not a volume file")
    if len(head) < 20:
        raise VoxwTruncatedError(f"{path}: header truncated")
    return struct.unpack("<III", head[8:20])


def write_mask(mask: BinaryMask, path: str | Path) -> None:
    """Masks share the volume container; bits stored as 0.0 / 1.0."""
    write_volume(Volume3D(mask.bits.astype(np.float32)), path)


def read_mask(path: str | Path) -> BinaryMask:
    vol = read_volume(path)
    return BinaryMask(vol.values > 0.5)


def shift_volume(vol: Volume3D, dx: int, dy: int, dz: int) -> Volume3D:
    """Translate by whole voxels, zero-filling the vacated band.

    out[x, y, z] = in[x - dx, y - dy, z - dz] where defined, else 0.
    """
    nx, ny, nz = vol.dims
    for d, n, name in ((dx, nx, "x"), (dy, ny, "y"), (dz, nz, "z")):
        if abs(d) >= n:
            raise ValidationError(f"shift {d} along {name} exceeds extent {n}")
    out = np.zeros_like(vol.values)

    def _slices(d: int, n: int):
        if d >= 0:
            return slice(d, n), slice(0, n - d)
        return slice(0, n + d), slice(-d, n)

    ox, ix = _slices(dx, nx)
    oy, iy = _slices(dy, ny)
    oz, iz = _slices(dz, nz)
    out[ox, oy, oz] = vol.values[ix, iy, iz]
    return Volume3D(out)
