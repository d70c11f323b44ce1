"""Sparse multi-level voxel grids.

A grid is a map from integer voxel coordinates to fixed-width payload vectors.  Storage is
two parallel arrays (``coords`` and ``values``) kept sorted by a packed 64-bit key, which gives
``O(log n)`` vectorised lookups via ``searchsorted``.  Payload values live at voxel centres:
voxel ``c`` covers ``[origin + c * voxel_size, origin + (c + 1) * voxel_size)``.
"""
from __future__ import annotations

import enum
import itertools
import struct
from typing import NamedTuple, Optional

import numpy as np

FINEST_VOXEL_SIZE = 0.04
N_LEVELS = 3

COORD_LIMIT = 1 << 20
_SPAN = np.uint64(2 * COORD_LIMIT + 1)
_OFFSET = COORD_LIMIT

# 3x3x3 neighbourhood in (dx, dy, dz) lexicographic order; index 13 is the centre and
# offset index k mirrors to 26 - k.
OFFSETS_27 = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CHILD_OFFSETS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


class LatticeError(ValueError):
    """Two grids do not live on the same world lattice."""


class PayloadKind(enum.IntEnum):
    TSDF = 1           # (o, x)
    WEIGHTED_TSDF = 2  # (tsdf, weight)
    FEATURE = 1000     # FEATURE + C: feature vector with C channels

    @staticmethod
    def feature(channels: int) -> int:
        return int(PayloadKind.FEATURE) + int(channels)

    @staticmethod
    def channels(kind: int) -> int:
        if kind in (PayloadKind.TSDF, PayloadKind.WEIGHTED_TSDF):
            return 2
        if kind > PayloadKind.FEATURE:
            return kind - PayloadKind.FEATURE
        raise ValueError(f"unknown payload kind {kind}")


class TsdfVoxel(NamedTuple):
    o: float
    x: float


def voxel_size_for_level(level: int, finest: float = FINEST_VOXEL_SIZE) -> float:
    if level not in (1, 2, 3):
        raise ValueError(f"level must be 1, 2 or 3, got {level}")
    return finest * 2 ** (N_LEVELS - level)


def pack_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.size and (c.min() < -COORD_LIMIT or c.max() > COORD_LIMIT):
        raise OverflowError(f"voxel coordinates must lie in [-2^20, 2^20]")
    u = (c + _OFFSET).astype(np.uint64)
    return (u[:, 0] * _SPAN + u[:, 1]) * _SPAN + u[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.uint64)
    z = k % _SPAN
    y = (k // _SPAN) % _SPAN
    x = k // (_SPAN * _SPAN)
    return np.stack([x, y, z], axis=1).astype(np.int64) - _OFFSET


class SparseVoxelGrid:
    """Coordinate-keyed sparse grid at one level.

    ``values`` has shape ``(n, channels)``.  Instances are treated as values by everything
    except :func:`replace_region`, which mutates the global grid in place.
    """

    def __init__(self, level: int, voxel_size: float, origin=(0.0, 0.0, 0.0),
                 coords: Optional[np.ndarray] = None, values: Optional[np.ndarray] = None,
                 channels: Optional[int] = None, kind: Optional[int] = None):
        self.level = int(level)
        self.voxel_size = float(voxel_size)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        if coords is None:
            if channels is None:
                channels = PayloadKind.channels(kind) if kind is not None else 1
            coords = np.zeros((0, 3), dtype=np.int64)
            values = np.zeros((0, channels))
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if len(values) != len(coords):
            raise ValueError("coords and values must have the same length")
        keys = pack_keys(coords)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate voxel coordinates")
        self.keys = keys
        self.coords = coords[order]
        self.values = values[order]
        self.kind = int(kind) if kind is not None else PayloadKind.feature(self.values.shape[1])

    # -- basic container protocol -------------------------------------------------------
    def __len__(self) -> int:
        return len(self.keys)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def __repr__(self) -> str:
        return (f"SparseVoxelGrid(level={self.level}, voxel_size={self.voxel_size}, "
                f"cells={len(self)}, channels={self.channels})")

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each coordinate, or -1 where the cell is absent."""
        q = pack_keys(coords)
        if len(self.keys) == 0:
            return np.full(len(q), -1, dtype=np.int64)
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == q
        return np.where(hit, pos_c, -1)

    def __contains__(self, coord) -> bool:
        return bool(self.lookup(np.asarray(coord).reshape(1, 3))[0] >= 0)

    def __getitem__(self, coord) -> np.ndarray:
        i = self.lookup(np.asarray(coord).reshape(1, 3))[0]
        if i < 0:
            raise KeyError(tuple(int(v) for v in np.asarray(coord).reshape(3)))
        return self.values[i]

    def items(self):
        for c, v in zip(self.coords, self.values):
            yield tuple(int(a) for a in c), v

    def tsdf(self, coord) -> TsdfVoxel:
        o, x = self[coord][:2]
        return TsdfVoxel(float(o), float(x))

    # -- derived grids --------------------------------------------------------------------
    def like(self, coords=None, values=None, kind=None) -> "SparseVoxelGrid":
        """New grid on the same lattice (level, voxel size, origin)."""
        if coords is None:
            ch = PayloadKind.channels(kind) if kind is not None else self.channels
            return SparseVoxelGrid(self.level, self.voxel_size, self.origin, channels=ch, kind=kind)
        return SparseVoxelGrid(self.level, self.voxel_size, self.origin, coords, values, kind=kind)

    def _sorted(self, keys, coords, values, kind) -> "SparseVoxelGrid":
        g = SparseVoxelGrid.__new__(SparseVoxelGrid)
        g.level, g.voxel_size, g.origin = self.level, self.voxel_size, self.origin.copy()
        g.keys, g.coords = keys, coords
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 2:
            width = PayloadKind.channels(kind) if kind is not None and not len(keys) else -1
            v = v.reshape(len(keys), width if len(keys) or width != -1 else 1)
        g.values = v
        g.kind = int(kind) if kind is not None else PayloadKind.feature(g.values.shape[1])
        return g

    def with_values(self, values: np.ndarray, kind=None) -> "SparseVoxelGrid":
        """Same (already sorted) coordinates with a new payload array."""
        return self._sorted(self.keys, self.coords, values, kind)

    def subset(self, mask: np.ndarray) -> "SparseVoxelGrid":
        return self._sorted(self.keys[mask], self.coords[mask], self.values[mask], self.kind)

    def copy(self) -> "SparseVoxelGrid":
        return self._sorted(self.keys.copy(), self.coords.copy(), self.values.copy(), self.kind)

    def centers(self) -> np.ndarray:
        """World positions of the voxel centres."""
        return self.origin + (self.coords + 0.5) * self.voxel_size

    def world_to_coords(self, points: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(points) - self.origin) / self.voxel_size).astype(np.int64)

    def neighbor_table(self, offsets: np.ndarray = OFFSETS_27) -> np.ndarray:
        """``(n, len(offsets))`` row indices of each cell's neighbours; ``n`` marks an absent one."""
        n = len(self)
        if n == 0:
            return np.zeros((0, len(offsets)), dtype=np.int64)
        q = (self.coords[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        idx = self.lookup(q).reshape(n, len(offsets))
        idx[idx < 0] = n
        return idx

    def lattice_offset(self, other: "SparseVoxelGrid") -> np.ndarray:
        """Integer shift mapping ``other``'s coordinates onto this grid's lattice."""
        if not np.isclose(self.voxel_size, other.voxel_size, rtol=1e-6, atol=0):
            raise LatticeError(f"voxel sizes differ: {self.voxel_size} vs {other.voxel_size}")
        d = (other.origin - self.origin) / self.voxel_size
        off = np.round(d)
        if np.abs(d - off).max() > 1e-4:
            raise LatticeError(f"origins {self.origin} and {other.origin} are not lattice-aligned")
        return off.astype(np.int64)

    def to_dense(self, shape=None, fill=0.0):
        """Dense ``(X, Y, Z, C)`` array anchored at the minimum stored coordinate (tests only)."""
        lo = self.coords.min(axis=0) if len(self) else np.zeros(3, dtype=np.int64)
        if shape is None:
            shape = tuple(self.coords.max(axis=0) - lo + 1) if len(self) else (0, 0, 0)
        dense = np.full(tuple(shape) + (self.channels,), fill, dtype=np.float64)
        c = self.coords - lo
        dense[c[:, 0], c[:, 1], c[:, 2]] = self.values
        return dense, lo


def concat_channels(*grids: SparseVoxelGrid) -> SparseVoxelGrid:
    """Channel concatenation of grids sharing one coordinate set."""
    base = grids[0]
    for g in grids[1:]:
        if len(g) != len(base) or not np.array_equal(g.keys, base.keys):
            raise ValueError("grids must share the same coordinate set")
    return base.with_values(np.concatenate([g.values for g in grids], axis=1))


def sparsify(grid: SparseVoxelGrid, theta: float = 0.5) -> SparseVoxelGrid:
    """Keep the cells whose occupancy score (channel 0) is at least ``theta``."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    return grid.subset(grid.values[:, 0] >= theta)


def upsample2x(grid: SparseVoxelGrid) -> SparseVoxelGrid:
    """Nearest-neighbour 2x upsampling: each cell spawns its 8 children carrying the same payload."""
    if grid.level >= N_LEVELS:
        raise ValueError("cannot upsample the finest level")
    coords = (2 * grid.coords[:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3)
    values = np.repeat(grid.values, 8, axis=0)
    return SparseVoxelGrid(grid.level + 1, grid.voxel_size / 2, grid.origin, coords, values, kind=grid.kind)


def extract_region(global_grid: SparseVoxelGrid, fbv) -> SparseVoxelGrid:
    """Cells whose centres lie inside ``fbv``, re-indexed in the frame anchored at ``fbv.min_corner``."""
    local_origin = np.asarray(fbv.min_corner, dtype=np.float64)
    probe = SparseVoxelGrid(global_grid.level, global_grid.voxel_size, local_origin)
    shift = global_grid.lattice_offset(probe)
    n = fbv.n_cells(global_grid.voxel_size)
    local = global_grid.coords - shift
    mask = np.all((local >= 0) & (local < n), axis=1)
    return SparseVoxelGrid(global_grid.level, global_grid.voxel_size, global_grid.origin + shift * global_grid.voxel_size,
                           local[mask], global_grid.values[mask], kind=global_grid.kind)


def replace_region(global_grid: SparseVoxelGrid, local: SparseVoxelGrid) -> None:
    """Overwrite or insert every cell of ``local`` into ``global_grid`` in place."""
    shift = global_grid.lattice_offset(local)
    if local.channels != global_grid.channels:
        raise ValueError(f"channel mismatch: {local.channels} vs {global_grid.channels}")
    if len(local) == 0:
        return
    coords = local.coords + shift
    keys = pack_keys(coords)
    keep = ~np.isin(global_grid.keys, keys, assume_unique=True)
    all_keys = np.concatenate([global_grid.keys[keep], keys])
    all_coords = np.concatenate([global_grid.coords[keep], coords])
    all_values = np.concatenate([global_grid.values[keep], local.values])
    order = np.argsort(all_keys, kind="stable")
    global_grid.keys = all_keys[order]
    global_grid.coords = all_coords[order]
    global_grid.values = all_values[order]


# ---------------------------------------------------------------------------
# serialization

SVXG_MAGIC = b"SVXG"
SVXG_VERSION = 1
_SVXG_HEADER = struct.Struct("<4sIIf3fIQ")


class VolumeFormatError(ValueError):
    pass


def _f32_roundtrip(v: float) -> float:
    # shortest decimal that round-trips the f32 value, e.g. 0.04 -> 0.04
    return float(str(np.float32(v)))


def save_grid(grid: SparseVoxelGrid, path) -> None:
    ch = grid.channels
    rec = np.dtype([("ijk", "<i4", 3), ("payload", "<f4", ch)])
    arr = np.empty(len(grid), dtype=rec)
    arr["ijk"] = grid.coords
    arr["payload"] = grid.values.reshape(len(grid), ch)
    with open(path, "wb") as fh:
        fh.write(_SVXG_HEADER.pack(SVXG_MAGIC, SVXG_VERSION, grid.level, grid.voxel_size,
                                   *grid.origin, grid.kind, len(grid)))
        fh.write(arr.tobytes())


def load_grid(path) -> SparseVoxelGrid:
    with open(path, "rb") as fh:
        head = fh.read(_SVXG_HEADER.size)
        if len(head) < _SVXG_HEADER.size:
            raise VolumeFormatError(f"{path}: truncated header")
        magic, version, level, vs, ox, oy, oz, kind, count = _SVXG_HEADER.unpack(head)
        if magic != SVXG_MAGIC:
            raise VolumeFormatError(f"{path}: bad magic {magic!r}")
        if version != SVXG_VERSION:
            raise VolumeFormatError(f"{path}: unsupported version {version}")
        ch = PayloadKind.channels(kind)
        rec = np.dtype([("ijk", "<i4", 3), ("payload", "<f4", ch)])
        body = fh.read()
    if len(body) != count * rec.itemsize:
        raise VolumeFormatError(f"{path}: expected {count} cells, file is truncated or padded")
    arr = np.frombuffer(body, dtype=rec)
    origin = [_f32_roundtrip(v) for v in (ox, oy, oz)]
    return SparseVoxelGrid(level, _f32_roundtrip(vs), origin, arr["ijk"].astype(np.int64),
                           arr["payload"].astype(np.float64).reshape(count, ch), kind=kind)
