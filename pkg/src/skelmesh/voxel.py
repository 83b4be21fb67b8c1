"""Occupancy grids: voxelization of point sets, morphological coarsening,
overlapped sub-volume partition/stitch, volume IoU, and the .voxb file format.

Grids are immutable values after construction. partition() yields independent
work items; stitch() is a deterministic mean reduction regardless of the order
sub-volumes come back in.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geom_core import _as_points

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned grid of values in [0,1] over a world-space bbox.

    values has shape dims=(dx,dy,dz), index [ix,iy,iz]; binary grids hold
    exactly {0,1}.
    """

    values: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        lo = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if vals.ndim != 3:
            raise ValueError(f"values must be 3-d, got shape {vals.shape}")
        if min(vals.shape) < 2:
            raise ValueError(f"dims must be >= 2 per axis, got {vals.shape}")
        if not np.all(lo < hi):
            raise ValueError("bbox min must be strictly below max per axis")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def cell_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.array(self.dims, dtype=np.float64)

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def occupied_count(self, threshold: float = 0.5) -> int:
        return int(np.count_nonzero(self.values >= threshold))

    def binarize(self, threshold: float = 0.5) -> "VoxelGrid":
        return VoxelGrid((self.values >= threshold).astype(np.float64),
                         self.bbox_min, self.bbox_max)

    def with_values(self, values: np.ndarray) -> "VoxelGrid":
        if values.shape != self.values.shape:
            raise ValueError("replacement values must match dims")
        return VoxelGrid(values, self.bbox_min, self.bbox_max)

    def voxel_centers(self) -> np.ndarray:
        """(dx,dy,dz,3) world-space cell centers."""
        cs = self.cell_size()
        axes = [self.bbox_min[d] + (np.arange(self.dims[d]) + 0.5) * cs[d] for d in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)


@dataclass(frozen=True)
class SubVolume:
    """A crop of a parent grid plus its integer voxel offset in the parent."""

    grid: VoxelGrid
    origin: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        if any(o < 0 for o in self.origin):
            raise ValueError("sub-volume origin must be non-negative")


def voxelize(cloud, dims, bbox_min, bbox_max) -> VoxelGrid:
    """Binary grid: a voxel is occupied iff at least one point falls in its
    half-open cell [lo, hi); points exactly on bbox max clamp into the last
    cell. Points outside the bbox are an error."""
    pts = _as_points(cloud)
    dims = tuple(int(d) for d in dims)
    lo = np.asarray(bbox_min, dtype=np.float64).reshape(3)
    hi = np.asarray(bbox_max, dtype=np.float64).reshape(3)
    if not np.all(lo < hi):
        raise ValueError("degenerate bbox")
    vals = np.zeros(dims, dtype=np.float64)
    if len(pts):
        bad = np.any((pts < lo) | (pts > hi), axis=1)
        if np.any(bad):
            raise ValueError(f"points outside bbox at indices {np.flatnonzero(bad)[:10].tolist()}")
        rel = (pts - lo) / (hi - lo) * np.array(dims)
        idx = np.minimum(rel.astype(np.int64), np.array(dims) - 1)
        vals[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(vals, lo, hi)


def dilate(grid: VoxelGrid, radius: int) -> VoxelGrid:
    """26-connected morphological dilation applied `radius` times."""
    if not grid.is_binary():
        raise ValueError("dilate requires a binary grid")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return grid  # scipy treats iterations=0 as 'until convergence'
    out = ndimage.binary_dilation(grid.values.astype(bool), structure=_STRUCT_26,
                                  iterations=radius)
    return grid.with_values(out.astype(np.float64))


def downsample(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Block-max downsampling (occupancy-preserving)."""
    dx, dy, dz = grid.dims
    if factor < 1 or dx % factor or dy % factor or dz % factor:
        raise ValueError(f"dims {grid.dims} not divisible by factor {factor}")
    v = grid.values.reshape(dx // factor, factor, dy // factor, factor, dz // factor, factor)
    return VoxelGrid(v.max(axis=(1, 3, 5)), grid.bbox_min, grid.bbox_max)


def upsample_replicate(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Nearest-neighbor (replication) upsampling."""
    v = grid.values
    for ax in range(3):
        v = np.repeat(v, factor, axis=ax)
    return VoxelGrid(v, grid.bbox_min, grid.bbox_max)


def _axis_offsets(dim: int, crop: int, stride: int) -> list[int]:
    """Regular offsets covering [0, dim); the last crop is clamped flush."""
    offs = list(range(0, dim - crop + 1, stride))
    if offs[-1] != dim - crop:
        offs.append(dim - crop)
    return offs


def partition(grid: VoxelGrid, crop: int, stride: int) -> list[SubVolume]:
    """Cut the grid into a deterministic lattice of overlapping crop^3
    sub-volumes; the final crop per axis is clamped flush to the boundary."""
    if stride < 1 or stride > crop:
        raise ValueError("need 1 <= stride <= crop")
    if any(crop > d for d in grid.dims):
        raise ValueError(f"crop {crop} exceeds grid dims {grid.dims}")
    cs = grid.cell_size()
    parts = []
    for ox in _axis_offsets(grid.dims[0], crop, stride):
        for oy in _axis_offsets(grid.dims[1], crop, stride):
            for oz in _axis_offsets(grid.dims[2], crop, stride):
                o = np.array([ox, oy, oz])
                lo = grid.bbox_min + o * cs
                hi = grid.bbox_min + (o + crop) * cs
                vals = grid.values[ox:ox + crop, oy:oy + crop, oz:oz + crop].copy()
                parts.append(SubVolume(VoxelGrid(vals, lo, hi), (ox, oy, oz)))
    return parts


def stitch(parts: list[SubVolume], dims, bbox_min, bbox_max) -> VoxelGrid:
    """Reassemble sub-volumes into a full grid, averaging where they overlap.

    Every voxel must be covered by at least one part. Contributions are
    summed in a canonical (sorted) order per voxel, so the result does not
    depend on the order sub-volumes are supplied in; voxels whose
    contributions all agree reproduce that value exactly.
    """
    dims = tuple(int(d) for d in dims)
    idx_chunks, val_chunks = [], []
    flat_index = np.arange(int(np.prod(dims)), dtype=np.int64).reshape(dims)
    for sv in parts:
        ox, oy, oz = sv.origin
        cx, cy, cz = sv.grid.dims
        if ox + cx > dims[0] or oy + cy > dims[1] or oz + cz > dims[2]:
            raise ValueError(f"sub-volume at {sv.origin} exceeds target dims {dims}")
        idx_chunks.append(flat_index[ox:ox + cx, oy:oy + cy, oz:oz + cz].ravel())
        val_chunks.append(sv.grid.values.ravel())
    if not idx_chunks:
        raise ValueError("stitch: no sub-volumes")
    idx = np.concatenate(idx_chunks)
    val = np.concatenate(val_chunks)
    order = np.lexsort((val, idx))
    idx, val = idx[order], val[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    covered = idx[starts]
    if covered.size != np.prod(dims):
        raise ValueError("stitch: some voxels are not covered by any sub-volume")
    counts = np.diff(np.r_[starts, idx.size])
    sums = np.add.reduceat(val, starts)
    mean = sums / counts
    ends = np.r_[starts[1:], idx.size] - 1
    agree = val[starts] == val[ends]  # sorted, so min == max
    mean[agree] = val[starts][agree]
    return VoxelGrid(mean.reshape(dims), bbox_min, bbox_max)


def iou(a: VoxelGrid, b: VoxelGrid, threshold: float = 0.5) -> float:
    """Intersection over union after thresholding; 1.0 when both are empty."""
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    ba = a.values >= threshold
    bb = b.values >= threshold
    union = np.count_nonzero(ba | bb)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(ba & bb) / union)


# ---------------------------------------------------------------------------
# .voxb format: magic "VOXB", u32 version=1, u32 dx,dy,dz, 6*f32 bbox,
# u8 flag (0 = u8 binary payload, 1 = f32 payload), payload x-fastest.

_VOXB_MAGIC = b"VOXB"


def save_voxb(path, grid: VoxelGrid):
    binary = grid.is_binary()
    with open(path, "wb") as fh:
        fh.write(_VOXB_MAGIC)
        fh.write(struct.pack("<IIII", 1, *grid.dims))
        fh.write(struct.pack("<6f", *grid.bbox_min, *grid.bbox_max))
        fh.write(struct.pack("<B", 0 if binary else 1))
        # x-fastest order = Fortran ravel of the [ix,iy,iz] array
        flat = grid.values.ravel(order="F")
        if binary:
            fh.write(flat.astype(np.uint8).tobytes())
        else:
            fh.write(flat.astype("<f4").tobytes())


def load_voxb(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        if fh.read(4) != _VOXB_MAGIC:
            raise ValueError(f"{path}: not a VOXB file")
        version, dx, dy, dz = struct.unpack("<IIII", fh.read(16))
        if version != 1:
            raise ValueError(f"{path}: unsupported VOXB version {version}")
        bbox = struct.unpack("<6f", fh.read(24))
        (flag,) = struct.unpack("<B", fh.read(1))
        count = dx * dy * dz
        if flag == 0:
            flat = np.frombuffer(fh.read(count), dtype=np.uint8).astype(np.float64)
        elif flag == 1:
            flat = np.frombuffer(fh.read(4 * count), dtype="<f4").astype(np.float64)
        else:
            raise ValueError(f"{path}: unknown payload flag {flag}")
    vals = flat.reshape((dx, dy, dz), order="F")
    return VoxelGrid(vals, bbox[:3], bbox[3:])
