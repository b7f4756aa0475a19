"""3-D volumes, axis-wise slicing, and tri-axial fusion.

Axis binding is fixed: Coronal -> dim 0 (H), Sagittal -> dim 1 (W),
Axial -> dim 2 (D).  A volume reconstructed independently along each of the
three slicing axes is merged by voxel-wise averaging (`fuse_axes`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .errors import IntegrityError, ShapeError, SliceIndexError, StructuralError

_VOLB_MAGIC = b"VOLB"
_VOLB_VERSION = 1
_DTYPE_F32LE = 1


class Axis(Enum):
    """Slicing axis, bound to one tensor dimension of a (H, W, D) volume."""

    CORONAL = 0
    SAGITTAL = 1
    AXIAL = 2

    @property
    def dim(self) -> int:
        return self.value

    def extent(self, shape: tuple[int, int, int]) -> int:
        return shape[self.dim]


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3-D scalar field with per-axis voxel spacing in mm.

    Pipeline-produced volumes are normalized to [0, 1]; the container does
    not enforce the range so that raw construction (pre-normalization) and
    degenerate test volumes remain expressible.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"volume data must be 3-D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"volume dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise StructuralError("volume contains non-finite values")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise StructuralError(f"invalid spacing {self.spacing}")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True, eq=False)
class Slice:
    """A 2-D plane extracted from a volume.

    `data` holds the single grayscale plane; `channels` records how many
    identical channels the networks see (`channel_data` replicates).
    """

    data: np.ndarray
    axis: Axis
    depth: int
    channels: int = 3

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeError(f"slice data must be 2-D, got shape {arr.shape}")
        if self.channels < 1:
            raise StructuralError(f"channels must be >= 1, got {self.channels}")
        object.__setattr__(self, "data", arr)

    def channel_data(self) -> np.ndarray:
        """Return (channels, h, w) with every channel identical."""
        return np.repeat(self.data[None, :, :], self.channels, axis=0)


def extract_slice(v: Volume, a: Axis, d: int, channels: int = 3) -> Slice:
    """Extract the plane at depth d along axis a as a fresh copy."""
    extent = a.extent(v.shape)
    if not 0 <= d < extent:
        raise SliceIndexError(
            f"depth {d} out of range for axis {a.name} with extent {extent}"
        )
    if a is Axis.CORONAL:
        plane = v.data[d, :, :]
    elif a is Axis.SAGITTAL:
        plane = v.data[:, d, :]
    else:
        plane = v.data[:, :, d]
    return Slice(data=plane.copy(), axis=a, depth=d, channels=channels)


def stack_slices(
    slices: Iterable[Slice],
    a: Axis,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Volume:
    """Reassemble a volume from slices covering depths 0..extent-1 exactly once."""
    slices = list(slices)
    if not slices:
        raise StructuralError("cannot stack an empty slice list")
    for s in slices:
        if s.axis is not a:
            raise StructuralError(f"slice at depth {s.depth} has axis {s.axis.name}, expected {a.name}")
    shapes = {s.data.shape for s in slices}
    if len(shapes) != 1:
        raise ShapeError(f"slices disagree on shape: {sorted(shapes)}")
    extent = len(slices)
    seen = sorted(s.depth for s in slices)
    if seen != list(range(extent)):
        missing = sorted(set(range(extent)) - set(seen))
        dupes = sorted({d for d in seen if seen.count(d) > 1})
        raise StructuralError(
            f"slice depths must cover 0..{extent - 1} exactly once; "
            f"missing={missing} duplicated={dupes}"
        )
    ordered = sorted(slices, key=lambda s: s.depth)
    data = np.stack([s.data for s in ordered], axis=a.dim)
    return Volume(data=data, spacing=spacing)


def fuse_axes(vols: Mapping[Axis, Volume]) -> Volume:
    """Voxel-wise arithmetic mean of three per-axis reconstructions."""
    if set(vols.keys()) != set(Axis):
        raise StructuralError(
            f"fusion needs exactly one volume per axis, got {sorted(a.name for a in vols)}"
        )
    shapes = {v.shape for v in vols.values()}
    if len(shapes) != 1:
        raise ShapeError(
            "fusion inputs must share a shape, got "
            + ", ".join(f"{a.name}={vols[a].shape}" for a in Axis)
        )
    spacings = {v.spacing for v in vols.values()}
    if len(spacings) != 1:
        raise StructuralError(f"fusion inputs disagree on spacing: {sorted(spacings)}")
    stackd = np.stack([vols[a].data.astype(np.float64) for a in Axis], axis=0)
    fused = stackd.mean(axis=0)
    dtype = vols[Axis.AXIAL].data.dtype
    return Volume(data=fused.astype(dtype), spacing=vols[Axis.AXIAL].spacing)


def save_volume(path, v: Volume) -> None:
    """Write the binary volume container (bit-exact round trip)."""
    arr = np.ascontiguousarray(v.data, dtype="<f4")
    header = struct.pack(
        "<4sHB3I3f",
        _VOLB_MAGIC,
        _VOLB_VERSION,
        _DTYPE_F32LE,
        *arr.shape,
        *(float(s) for s in v.spacing),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_volume(path) -> Volume:
    """Read a volume container written by save_volume."""
    header_size = struct.calcsize("<4sHB3I3f")
    with open(path, "rb") as fh:
        header = fh.read(header_size)
        if len(header) < header_size:
            raise IntegrityError(f"{path}: truncated header")
        magic, version, dtag, h, w, d, sx, sy, sz = struct.unpack("<4sHB3I3f", header)
        if magic != _VOLB_MAGIC:
            raise IntegrityError(f"{path}: bad magic {magic!r}")
        if version != _VOLB_VERSION:
            raise IntegrityError(f"{path}: unsupported container version {version}")
        if dtag != _DTYPE_F32LE:
            raise IntegrityError(f"{path}: unknown dtype tag {dtag}")
        payload = fh.read(4 * h * w * d)
        if len(payload) != 4 * h * w * d:
            raise IntegrityError(f"{path}: truncated payload")
        extra = fh.read(1)
        if extra:
            raise IntegrityError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    return Volume(data=data.copy(), spacing=(sx, sy, sz))
