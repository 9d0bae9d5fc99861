"""Voxel volume containers and raw/NIfTI I/O.

Grids are axis aligned. A volume with dims (nx, ny, nz), spacing s and
origin o maps voxel index (i, j, k) to the world position of the voxel
center, o + (i*sx, j*sy, k*sz), in millimeters. Data is kept as a 3-D
array indexed [i, j, k]; the flat serialization order is x-fastest
(Fortran ravel of that array).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

MASK = "binary-mask"
FIELD = "scalar-field"

_VMV_MAGIC = "VMV1"
_NIFTI_HDR_SIZE = 348


class VolumeError(ValueError):
    """Raised on malformed volumes or unreadable volume files."""


@dataclass(frozen=True)
class VoxelVolume:
    """A 3-D scalar or binary grid with physical spacing.

    Attributes
    ----------
    data : (nx, ny, nz) ndarray
        Voxel values, indexed [i, j, k].
    spacing : (3,) float ndarray
        Millimeters per voxel step along x, y, z. All positive.
    origin : (3,) float ndarray
        World position (mm) of the center of voxel (0, 0, 0).
    kind : str
        Either ``MASK`` (values exactly 0/1) or ``FIELD``.
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    kind: str = MASK

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume data must be 3-D with all dims >= 1, got shape {data.shape}")
        spacing = np.asarray(self.spacing, dtype=float).reshape(3)
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        if not np.all(spacing > 0):
            raise VolumeError(f"spacing must be positive, got {spacing}")
        if self.kind not in (MASK, FIELD):
            raise VolumeError(f"unknown volume kind {self.kind!r}")
        if self.kind == MASK:
            vals = np.unique(data)
            if not np.all(np.isin(vals, (0, 1))):
                raise VolumeError("binary-mask volume contains values other than 0 and 1")
            data = data.astype(np.uint8)
        else:
            data = data.astype(np.float64)
        data.setflags(write=False)
        spacing.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def index_to_world(self, idx) -> np.ndarray:
        """Voxel indices (..., 3) to world coordinates (mm) of voxel centers."""
        return self.origin + np.asarray(idx, dtype=float) * self.spacing

    def world_to_index(self, pts) -> np.ndarray:
        """World coordinates (mm) to fractional voxel indices."""
        return (np.asarray(pts, dtype=float) - self.origin) / self.spacing

    def set_voxel_centers(self) -> np.ndarray:
        """World centers (n, 3) of all nonzero voxels, ordered by x-fastest linear index."""
        flat = np.flatnonzero(self.data.ravel(order="F"))
        idx = np.column_stack(np.unravel_index(flat, self.dims, order="F"))
        return self.index_to_world(idx)

    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True)
class FeatureGrid:
    """Multi-channel scalar grid sharing one geometry.

    channels has shape (C, nx, ny, nz) and C >= 1.
    """

    base: VoxelVolume
    channels: np.ndarray = field(repr=False)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 4 or ch.shape[0] < 1:
            raise VolumeError(f"channels must be (C, nx, ny, nz) with C >= 1, got {ch.shape}")
        if ch.shape[1:] != self.base.dims:
            raise VolumeError(f"channel dims {ch.shape[1:]} do not match base dims {self.base.dims}")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]


def sample_trilinear(grid: FeatureGrid, points) -> np.ndarray:
    """Trilinear interpolation of every channel at world points.

    Coordinates outside the grid are clamped to the boundary, so the
    function is total; deforming meshes may transiently leave the patch.

    Parameters
    ----------
    points : (3,) or (n, 3) array in mm.

    Returns
    -------
    (C,) or (n, C) array of interpolated channel values.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    idx = grid.base.world_to_index(pts)
    hi = np.asarray(grid.base.dims, dtype=float) - 1.0
    idx = np.clip(idx, 0.0, hi)  # mode='nearest' would clamp too; explicit keeps intent visible
    coords = idx.T
    out = np.empty((pts.shape[0], grid.n_channels))
    for c in range(grid.n_channels):
        out[:, c] = ndimage.map_coordinates(grid.channels[c], coords, order=1, mode="nearest")
    return out[0] if single else out


def occupancy_sampler(mask: VoxelVolume):
    """Return f(points) giving trilinear occupancy of a binary mask in [0, 1]."""
    grid = FeatureGrid(
        VoxelVolume(mask.data.astype(np.float64), mask.spacing, mask.origin, kind=FIELD),
        mask.data.astype(np.float64)[None],
    )

    def occ(points):
        vals = sample_trilinear(grid, points)
        return vals if np.ndim(points) == 1 else vals[:, 0]

    def occ1(points):
        out = occ(points)
        return float(out[0]) if np.ndim(points) == 1 else out

    return occ1


# ---------------------------------------------------------------------------
# raw VMV1 format


def save_volume(vol: VoxelVolume, path: str | os.PathLike) -> None:
    """Write the raw format: one text header line, then x-fastest little-endian payload."""
    if vol.kind == MASK:
        dtype_tag, payload = "u8", vol.data.astype("<u1")
    else:
        dtype_tag, payload = "f32", vol.data.astype("<f4")
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    header = (
        f"{_VMV_MAGIC} {nx} {ny} {nz} "
        f"{sx:.17g} {sy:.17g} {sz:.17g} {ox:.17g} {oy:.17g} {oz:.17g} {dtype_tag}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.ravel(order="F").tobytes())


def _load_vmv(path) -> VoxelVolume:
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    try:
        parts = header.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise VolumeError(f"{path}: header is not ASCII text") from exc
    if len(parts) != 11 or parts[0] != _VMV_MAGIC:
        raise VolumeError(f"{path}: missing {_VMV_MAGIC} header")
    nx, ny, nz = (int(p) for p in parts[1:4])
    spacing = [float(p) for p in parts[4:7]]
    origin = [float(p) for p in parts[7:10]]
    dtype_tag = parts[10]
    if dtype_tag == "u8":
        np_dtype, kind = np.dtype("<u1"), MASK
    elif dtype_tag == "f32":
        np_dtype, kind = np.dtype("<f4"), FIELD
    else:
        raise VolumeError(f"{path}: unsupported datatype {dtype_tag!r} (expected u8 or f32)")
    n = nx * ny * nz
    if len(blob) != n * np_dtype.itemsize:
        raise VolumeError(
            f"{path}: payload holds {len(blob)} bytes but dims {nx}x{ny}x{nz} "
            f"require {n * np_dtype.itemsize}"
        )
    flat = np.frombuffer(blob, dtype=np_dtype)
    data = flat.reshape((nx, ny, nz), order="F")
    if kind == MASK and not np.all((data == 0) | (data == 1)):
        # u8 payloads above 1 are treated as scalar fields, not masks
        return VoxelVolume(data.astype(np.float64), spacing, origin, kind=FIELD)
    return VoxelVolume(data, spacing, origin, kind=kind)


# ---------------------------------------------------------------------------
# NIfTI-1 read-only subset


def _load_nifti(path) -> VoxelVolume:
    with open(path, "rb") as fh:
        hdr = fh.read(_NIFTI_HDR_SIZE)
        if len(hdr) < _NIFTI_HDR_SIZE:
            raise VolumeError(f"{path}: file shorter than a NIfTI-1 header")
        magic = hdr[344:348]
        if magic != b"n+1\x00":
            raise VolumeError(f"{path}: NIfTI magic 'n+1' absent")
        for endian in ("<", ">"):
            (sizeof_hdr,) = struct.unpack(endian + "i", hdr[0:4])
            if sizeof_hdr == _NIFTI_HDR_SIZE:
                break
        else:
            raise VolumeError(f"{path}: sizeof_hdr is not 348 under either byte order")
        dim = struct.unpack(endian + "8h", hdr[40:56])
        (datatype,) = struct.unpack(endian + "h", hdr[70:72])
        pixdim = struct.unpack(endian + "8f", hdr[76:108])
        (vox_offset,) = struct.unpack(endian + "f", hdr[108:112])
        ndim = dim[0]
        if ndim < 3 or any(d > 1 for d in dim[4 : 1 + max(3, ndim)]):
            raise VolumeError(f"{path}: only 3-D NIfTI volumes are supported, dim={dim}")
        nx, ny, nz = dim[1], dim[2], dim[3]
        if datatype == 2:
            np_dtype = np.dtype(endian + "u1")
        elif datatype == 16:
            np_dtype = np.dtype(endian + "f4")
        else:
            raise VolumeError(f"{path}: unsupported NIfTI datatype {datatype} (expected 2 or 16)")
        offset = max(int(vox_offset), _NIFTI_HDR_SIZE)
        fh.seek(offset)
        n = nx * ny * nz
        blob = fh.read(n * np_dtype.itemsize)
    if len(blob) != n * np_dtype.itemsize:
        raise VolumeError(f"{path}: NIfTI payload truncated ({len(blob)} bytes for {n} voxels)")
    data = np.frombuffer(blob, dtype=np_dtype).reshape((nx, ny, nz), order="F")
    spacing = [float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4]]
    vol_kind = MASK if (datatype == 2 and np.all((data == 0) | (data == 1))) else FIELD
    return VoxelVolume(data.astype(np.float64), spacing, (0.0, 0.0, 0.0), kind=vol_kind)


def load_volume(path: str | os.PathLike, format_hint: str | None = None,
                as_mask: bool | None = None) -> VoxelVolume:
    """Load a volume from the raw format or the NIfTI-1 subset.

    format_hint may be "vmv" or "nifti"; by default the format is sniffed
    from the file's leading bytes. With as_mask=True, scalar payloads are
    thresholded at > 0.5 into a binary mask.
    """
    if not os.path.isfile(path):
        raise VolumeError(f"{path}: no such file")
    if format_hint is None:
        with open(path, "rb") as fh:
            head = fh.read(4)
        format_hint = "vmv" if head == b"VMV1" else "nifti"
    if format_hint == "vmv":
        vol = _load_vmv(path)
    elif format_hint == "nifti":
        vol = _load_nifti(path)
    else:
        raise VolumeError(f"unknown format hint {format_hint!r} (expected 'vmv' or 'nifti')")
    if as_mask and vol.kind != MASK:
        data = (vol.data > 0.5).astype(np.uint8)
        vol = VoxelVolume(data, vol.spacing, vol.origin, kind=MASK)
    return vol


# ---------------------------------------------------------------------------
# voxel-level primitives


def connected_components(mask: VoxelVolume) -> tuple[VoxelVolume, int]:
    """Label 26-connected components of a binary mask.

    Components are numbered 1..count in first-visit order by x-fastest
    linear index, so the labeling does not depend on library internals.
    """
    if mask.kind != MASK:
        raise VolumeError("connected_components requires a binary mask")
    structure = np.ones((3, 3, 3), dtype=bool)
    raw, count = ndimage.label(mask.data, structure=structure)
    if count > 1:
        flat = raw.ravel(order="F")
        labels, first = np.unique(flat, return_index=True)
        order = np.argsort(first[labels > 0])
        remap = np.zeros(count + 1, dtype=raw.dtype)
        remap[labels[labels > 0][order]] = np.arange(1, count + 1)
        raw = remap[raw]
    out = VoxelVolume(raw.astype(np.float64), mask.spacing, mask.origin, kind=FIELD)
    return out, int(count)


def dice(a: VoxelVolume, b: VoxelVolume) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|). Two empty masks score 1.0 by convention."""
    if a.kind != MASK or b.kind != MASK:
        raise VolumeError("dice requires binary masks")
    if a.dims != b.dims:
        raise VolumeError(f"dice: dims mismatch {a.dims} vs {b.dims}")
    na = int(np.count_nonzero(a.data))
    nb = int(np.count_nonzero(b.data))
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.data & b.data))
    return 2.0 * inter / (na + nb)


def crop(vol: VoxelVolume, lo_idx, hi_idx) -> VoxelVolume:
    """Sub-volume over the half-open index box [lo, hi); origin is shifted accordingly."""
    lo = np.asarray(lo_idx, dtype=int)
    hi = np.asarray(hi_idx, dtype=int)
    if np.any(lo < 0) or np.any(hi > np.asarray(vol.dims)) or np.any(hi <= lo):
        raise VolumeError(f"crop box [{lo}, {hi}) outside volume dims {vol.dims}")
    data = vol.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    return VoxelVolume(np.array(data), vol.spacing, vol.index_to_world(lo), kind=vol.kind)
