"""Sparse voxel volumes keyed by integer grid coordinates.

Coordinates are stored as a lexicographically sorted ``(N, 3)`` int64 tensor
together with their linear keys ``(x * NY + y) * NZ + z``.  The key is a
perfect hash inside ``dims``, and because coordinates are non-negative the
sorted key order is the lexicographic coordinate order, so lookups reduce to
``searchsorted`` and iteration order is deterministic.
"""

from __future__ import annotations

import math

import itertools
import struct
from dataclasses import dataclass
from typing import BinaryIO, NamedTuple

import numpy as np
import torch

from .errors import PreconditionError, StructuralError

Dims = tuple[int, int, int]

# bound on (query voxels x offsets) materialized at once by neighbor searches
_LOOKUP_CHUNK = 4_000_000


class VoxelCoord(NamedTuple):
    x: int
    y: int
    z: int


def linear_keys(coords: torch.Tensor, dims: Dims) -> torch.Tensor:
    coords = coords.long()
    return (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]


def inside(coords: torch.Tensor, dims: Dims) -> torch.Tensor:
    hi = torch.tensor(dims, dtype=torch.long)
    return ((coords >= 0) & (coords < hi)).all(dim=-1)


class SparseVolume:
    """Map from voxel coordinates to feature rows.

    ``feats`` may carry autograd history; every structural operation in this
    module is built from differentiable gathers and scatters.
    """

    def __init__(self, coords, feats, dims, level: int = 0, voxel_size: float = 0.04, *, _sorted: bool = False):
        coords = torch.as_tensor(coords, dtype=torch.long).reshape(-1, 3)
        feats = torch.as_tensor(feats)
        if not feats.is_floating_point():
            feats = feats.to(torch.get_default_dtype())
        if feats.dim() == 1:
            feats = feats.reshape(-1, 1)
        if feats.shape[0] != coords.shape[0]:
            raise StructuralError(f"{coords.shape[0]} coordinates but {feats.shape[0]} feature rows")
        self.dims: Dims = tuple(int(d) for d in dims)
        if level not in (0, 1, 2):
            raise StructuralError(f"level must be 0, 1 or 2, got {level}")
        self.level = level
        self.voxel_size = float(voxel_size)
        if len(coords) and not bool(inside(coords, self.dims).all()):
            raise StructuralError("coordinates outside volume dims")
        keys = linear_keys(coords, self.dims)
        if not _sorted:
            keys, order = torch.sort(keys)
            coords, feats = coords[order], feats[order]
        if len(keys) > 1 and bool((keys[1:] == keys[:-1]).any()):
            raise StructuralError("duplicate voxel coordinates")
        self.coords = coords
        self.feats = feats
        self.keys = keys
        # neighbor tables derived from coords; shared by volumes with identical coords
        self._cache: dict = {}

    # construction helpers -------------------------------------------------

    @classmethod
    def empty(cls, dims, channels: int, level: int = 0, voxel_size: float = 0.04) -> "SparseVolume":
        return cls(torch.zeros((0, 3), dtype=torch.long), torch.zeros((0, channels)), dims, level, voxel_size)

    @classmethod
    def dense(cls, dims, feats=None, channels: int = 1, level: int = 0, voxel_size: float = 0.04) -> "SparseVolume":
        grids = torch.meshgrid(*(torch.arange(d) for d in dims), indexing="ij")
        coords = torch.stack([g.reshape(-1) for g in grids], dim=1)
        if feats is None:
            feats = torch.zeros((len(coords), channels))
        return cls(coords, feats, dims, level, voxel_size, _sorted=True)

    def with_feats(self, feats: torch.Tensor) -> "SparseVolume":
        out = type(self)(self.coords, feats, self.dims, self.level, self.voxel_size, _sorted=True)
        out._cache = self._cache
        return out

    def like(self, coords, feats, dims=None, voxel_size=None, *, _sorted=False):
        return SparseVolume(
            coords,
            feats,
            self.dims if dims is None else dims,
            self.level,
            self.voxel_size if voxel_size is None else voxel_size,
            _sorted=_sorted,
        )

    # map protocol ---------------------------------------------------------

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __repr__(self) -> str:
        return (
            f"SparseVolume(n={len(self)}, channels={self.channels}, dims={self.dims}, "
            f"level={self.level}, voxel_size={self.voxel_size})"
        )

    def lookup(self, coords: torch.Tensor) -> torch.Tensor:
        """Row index of each query coordinate, -1 where inactive or outside dims."""
        coords = torch.as_tensor(coords, dtype=torch.long)
        shape = coords.shape[:-1]
        coords = coords.reshape(-1, 3)
        out = torch.full((coords.shape[0],), -1, dtype=torch.long)
        if len(self) == 0 or coords.shape[0] == 0:
            return out.reshape(shape)
        ok = inside(coords, self.dims)
        q = linear_keys(coords[ok], self.dims)
        pos = torch.searchsorted(self.keys, q).clamp(max=len(self) - 1)
        hit = self.keys[pos] == q
        out[ok] = torch.where(hit, pos, torch.full_like(pos, -1))
        return out.reshape(shape)

    def __contains__(self, coord) -> bool:
        return bool(self.lookup(torch.tensor([tuple(coord)]))[0] >= 0)

    def __getitem__(self, coord) -> torch.Tensor:
        idx = int(self.lookup(torch.tensor([tuple(coord)]))[0])
        if idx < 0:
            raise KeyError(tuple(coord))
        return self.feats[idx]

    def active(self) -> set[VoxelCoord]:
        return {VoxelCoord(*c) for c in self.coords.tolist()}

    def coord_list(self) -> list[VoxelCoord]:
        return [VoxelCoord(*c) for c in self.coords.tolist()]

    def translated(self, offset, dims=None) -> "SparseVolume":
        offset = torch.as_tensor(offset, dtype=torch.long).reshape(1, 3)
        return self.like(self.coords + offset, self.feats, dims=dims, _sorted=True)


class OccupancyVolume(SparseVolume):
    """Single-channel volume of occupancy probabilities."""

    def __init__(self, coords, feats, dims, level: int = 0, voxel_size: float = 0.04, *, _sorted: bool = False):
        super().__init__(coords, feats, dims, level, voxel_size, _sorted=_sorted)
        if self.channels != 1:
            raise StructuralError("occupancy volumes carry exactly one channel")
        if len(self):
            v = self.feats.detach()
            if bool((v < 0).any() or (v > 1).any()):
                raise StructuralError("occupancy values must lie in [0, 1]")

    @property
    def values(self) -> torch.Tensor:
        return self.feats[:, 0]


@dataclass
class SampleMap:
    """Parent/child grouping recorded by one downsampling step.

    ``parent_index[k]`` is the row in ``parent_coords`` owning ``child_coords[k]``.
    """

    child_coords: torch.Tensor
    parent_coords: torch.Tensor
    parent_index: torch.Tensor
    child_dims: Dims
    parent_dims: Dims
    child_voxel_size: float

    def children(self, parent) -> list[VoxelCoord]:
        p = torch.as_tensor(tuple(parent), dtype=torch.long)
        rows = (self.parent_coords == p).all(dim=1).nonzero().flatten()
        if len(rows) == 0:
            return []
        kids = self.child_coords[self.parent_index == rows[0]]
        return [VoxelCoord(*c) for c in kids.tolist()]

    def as_dict(self) -> dict[VoxelCoord, list[VoxelCoord]]:
        out: dict[VoxelCoord, list[VoxelCoord]] = {}
        parents = [VoxelCoord(*c) for c in self.parent_coords.tolist()]
        for child, pi in zip(self.child_coords.tolist(), self.parent_index.tolist()):
            out.setdefault(parents[pi], []).append(VoxelCoord(*child))
        return out


def half_dims(dims: Dims) -> Dims:
    return tuple((d + 1) // 2 for d in dims)


def window_offsets(n: int) -> torch.Tensor:
    """Offsets spanning ``-(n // 2) .. -(n // 2) + n - 1`` per axis, lexicographic.

    Odd ``n`` is centred; even ``n`` reaches one cell further on the negative side.
    """
    if n < 1:
        raise PreconditionError(f"window size must be >= 1, got {n}")
    lo = -(n // 2)
    r = range(lo, lo + n)
    return torch.tensor(list(itertools.product(r, r, r)), dtype=torch.long)


KERNEL3 = window_offsets(3)


# grids up to this many cells (padded) use a dense key -> row table for neighbor gathers
DENSE_LOOKUP_CELLS = 1 << 24


def _dense_rows(vol: SparseVolume, r: int) -> tuple[torch.Tensor, tuple[int, int, int]]:
    """Row index per cell of the grid padded by ``r`` on every side, -1 where inactive."""
    key = ("dense_rows", r)
    if key not in vol._cache:
        padded = tuple(d + 2 * r for d in vol.dims)
        grid = torch.full((padded[0] * padded[1] * padded[2],), -1, dtype=torch.long)
        grid[linear_keys(vol.coords + r, padded)] = torch.arange(len(vol))
        vol._cache[key] = (grid, padded)
    return vol._cache[key]


def gather_table(vol: SparseVolume, queries: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """(len(queries), len(offsets)) row indices into ``vol``, -1 where absent."""
    r = int(offsets.abs().max()) if offsets.numel() else 0
    padded_cells = math.prod(d + 2 * r for d in vol.dims)
    if len(vol) and padded_cells <= DENSE_LOOKUP_CELLS and bool(inside(queries, vol.dims).all()):
        grid, padded = _dense_rows(vol, r)
        base = linear_keys(queries + r, padded)
        delta = linear_keys(offsets, padded)
        return grid[base[:, None] + delta[None, :]]
    out = torch.empty((queries.shape[0], offsets.shape[0]), dtype=torch.long)
    step = max(1, _LOOKUP_CHUNK // max(1, offsets.shape[0]))
    for s in range(0, queries.shape[0], step):
        q = queries[s : s + step, None, :] + offsets[None, :, :]
        out[s : s + step] = vol.lookup(q)
    return out


def window_edges(vol: SparseVolume, n: int, with_table: bool = False):
    """All (center, neighbor) row pairs with the neighbor inside the center's window.

    Pairs come grouped by center in row order, neighbors in lexicographic
    order.  The third tensor indexes each pair's offset in ``window_offsets(n)``;
    ``with_table`` appends the full (N, n^3) neighbor table (-1 where absent).
    """
    key = ("window", n)
    if key not in vol._cache:
        table = gather_table(vol, vol.coords, window_offsets(n))
        centers, slots = (table >= 0).nonzero(as_tuple=True)
        vol._cache[key] = (centers, table[centers, slots], slots, table)
    edges = vol._cache[key]
    return edges if with_table else edges[:3]


def all_pairs(num: int) -> tuple[torch.Tensor, torch.Tensor]:
    idx = torch.arange(num)
    return idx.repeat_interleave(num), idx.repeat(num)


def window_neighbors(vol: SparseVolume, center, n: int) -> list[VoxelCoord]:
    c = torch.as_tensor(tuple(center), dtype=torch.long).reshape(1, 3)
    if vol.lookup(c)[0] < 0:
        raise PreconditionError(f"window center {tuple(center)} is not an active voxel")
    rows = gather_table(vol, c, window_offsets(n))[0]
    return [VoxelCoord(*x) for x in vol.coords[rows[rows >= 0]].tolist()]


def sparsify(vol: SparseVolume, occ: SparseVolume, threshold: float = 0.5) -> SparseVolume:
    """Keep voxels whose parent in the next coarser level has occupancy >= threshold.

    Parents absent from ``occ`` count as empty.
    """
    if occ.level != vol.level + 1:
        raise StructuralError(f"occupancy level {occ.level} is not the parent of volume level {vol.level}")
    if occ.channels != 1:
        raise StructuralError("occupancy volume must have one channel")
    rows = occ.lookup(torch.div(vol.coords, 2, rounding_mode="floor"))
    values = occ.feats.detach()[:, 0]
    keep = rows >= 0
    keep[keep.clone()] = values[rows[keep]] >= threshold
    return vol.like(vol.coords[keep], vol.feats[keep], _sorted=True)


def dilate(vol: SparseVolume) -> SparseVolume:
    """3x3x3 morphological dilation clipped to dims; new voxels get zero features."""
    if len(vol) == 0:
        return vol
    cand = (vol.coords[:, None, :] + KERNEL3[None]).reshape(-1, 3)
    cand = cand[inside(cand, vol.dims)]
    keys = torch.unique(linear_keys(cand, vol.dims))
    coords = _unravel(keys, vol.dims)
    pos = torch.searchsorted(keys, vol.keys)
    feats = vol.feats.new_zeros((len(keys), vol.channels)).index_copy(0, pos, vol.feats)
    return vol.like(coords, feats, _sorted=True)


def _unravel(keys: torch.Tensor, dims: Dims) -> torch.Tensor:
    z = keys % dims[2]
    y = (keys // dims[2]) % dims[1]
    x = keys // (dims[1] * dims[2])
    return torch.stack([x, y, z], dim=1)


def downsample(vol: SparseVolume) -> tuple[SparseVolume, SampleMap]:
    """Halve resolution; each parent feature is the mean of its children."""
    pdims = half_dims(vol.dims)
    parents = torch.div(vol.coords, 2, rounding_mode="floor")
    pkeys, inverse = torch.unique(linear_keys(parents, pdims), return_inverse=True)
    pcoords = _unravel(pkeys, pdims)
    counts = torch.zeros(len(pkeys), dtype=vol.feats.dtype).index_add_(
        0, inverse, torch.ones(len(vol), dtype=vol.feats.dtype)
    )
    sums = vol.feats.new_zeros((len(pkeys), vol.channels)).index_add(0, inverse, vol.feats)
    out = vol.like(pcoords, sums / counts.clamp(min=1).unsqueeze(1), dims=pdims, voxel_size=2 * vol.voxel_size, _sorted=True)
    smap = SampleMap(vol.coords, pcoords, inverse, vol.dims, pdims, vol.voxel_size)
    return out, smap


def upsample(vol: SparseVolume, smap: SampleMap) -> SparseVolume:
    """Restore the child coordinate set of ``smap``; children copy their parent's feature."""
    if tuple(vol.dims) != tuple(smap.parent_dims):
        raise StructuralError(f"volume dims {vol.dims} do not match sample map parent dims {smap.parent_dims}")
    rows = vol.lookup(smap.parent_coords)
    if bool((rows < 0).any()):
        missing = smap.parent_coords[rows < 0][0].tolist()
        raise StructuralError(f"parent {tuple(missing)} from sample map missing in volume")
    feats = vol.feats[rows[smap.parent_index]]
    return vol.like(smap.child_coords, feats, dims=smap.child_dims, voxel_size=smap.child_voxel_size, _sorted=True)


def child_slot(smap: SampleMap) -> torch.Tensor:
    """Index 0..7 of each child's position inside its parent cell."""
    off = smap.child_coords - 2 * smap.parent_coords[smap.parent_index]
    return off[:, 0] * 4 + off[:, 1] * 2 + off[:, 2]


def kernel3_conv(vol: SparseVolume, weight: torch.Tensor, bias: torch.Tensor | None, out_coords=None) -> torch.Tensor:
    """Kernel-3 sparse linear map evaluated at ``out_coords`` (default: vol's own voxels).

    ``weight`` is (27, C_in, C_out) in lexicographic offset order.  Only active
    inputs contribute, so evaluating at the volume's own coordinates is a
    submanifold convolution.
    """
    if out_coords is None:
        if "kernel3" not in vol._cache:
            vol._cache["kernel3"] = gather_table(vol, vol.coords, KERNEL3)
        out_coords, table = vol.coords, vol._cache["kernel3"]
    else:
        table = gather_table(vol, out_coords, KERNEL3)
    c_in, c_out = weight.shape[1], weight.shape[2]
    padded = torch.cat([vol.feats, vol.feats.new_zeros((1, c_in))])
    rows = torch.where(table >= 0, table, torch.full_like(table, len(vol)))
    out = padded[rows].reshape(-1, 27 * c_in) @ weight.reshape(27 * c_in, c_out)
    if bias is not None:
        out = out + bias
    return out


# snapshot container ------------------------------------------------------

SNAPSHOT_MAGIC = b"SVOL"
SNAPSHOT_VERSION = 1


def write_snapshot(vol: SparseVolume, fh: BinaryIO) -> None:
    fh.write(SNAPSHOT_MAGIC)
    fh.write(struct.pack("<IIf4I", SNAPSHOT_VERSION, vol.level, vol.voxel_size, *vol.dims, vol.channels))
    fh.write(struct.pack("<Q", len(vol)))
    rec = np.dtype([("coord", "<i4", (3,)), ("feat", "<f4", (vol.channels,))])
    arr = np.empty(len(vol), dtype=rec)
    arr["coord"] = vol.coords.numpy()
    arr["feat"] = vol.feats.detach().cpu().numpy().reshape(len(vol), vol.channels)
    fh.write(arr.tobytes())


def read_snapshot(fh: BinaryIO) -> SparseVolume:
    if fh.read(4) != SNAPSHOT_MAGIC:
        raise StructuralError("not an SVOL snapshot")
    version, level, voxel_size, dx, dy, dz, channels = struct.unpack("<IIf4I", fh.read(28))
    if version != SNAPSHOT_VERSION:
        raise StructuralError(f"unsupported snapshot version {version}")
    (count,) = struct.unpack("<Q", fh.read(8))
    rec = np.dtype([("coord", "<i4", (3,)), ("feat", "<f4", (channels,))])
    arr = np.frombuffer(fh.read(rec.itemsize * count), dtype=rec, count=count)
    coords = torch.from_numpy(arr["coord"].astype(np.int64))
    feats = torch.from_numpy(arr["feat"].astype(np.float32).reshape(count, channels)).to(torch.get_default_dtype())
    return SparseVolume(coords, feats, (dx, dy, dz), level, voxel_size)
