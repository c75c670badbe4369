"""Active-voxel sets with the neighbour / parent / child tables that the
sparse convolutions gather through."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..voxel import SparseVoxelGrid, keys_to_ijk, linear_keys

OFFSETS_27 = np.array(
    [[a, b, c] for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64
)
OFFSETS_8 = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64)

_CACHE: "OrderedDict[tuple, VoxelSet]" = OrderedDict()
CACHE_SIZE = 128


class VoxelSet:
    """An ordered set of voxel indices at one resolution.

    Row order is whatever the constructor received; lookups go through a
    sorted key array so any order works.
    """

    def __init__(self, resolution: int, ijk: np.ndarray):
        self.resolution = int(resolution)
        self.ijk = np.array(ijk, dtype=np.int64).reshape(-1, 3)
        self.ijk.flags.writeable = False
        self.keys = linear_keys(self.ijk, self.resolution)
        self._order = np.argsort(self.keys, kind="stable")
        self._sorted = self.keys[self._order]
        self._nbr = None
        self._parents = None

    def __len__(self) -> int:
        return len(self.ijk)

    @classmethod
    def shared(cls, resolution: int, ijk: np.ndarray) -> "VoxelSet":
        """Like the constructor, but memoised so repeated supports (one per
        training shape) keep their neighbour tables across iterations."""
        ijk = np.ascontiguousarray(ijk, dtype=np.int64).reshape(-1, 3)
        key = (int(resolution), ijk.tobytes())
        vs = _CACHE.get(key)
        if vs is None:
            vs = cls(resolution, ijk)
            _CACHE[key] = vs
            if len(_CACHE) > CACHE_SIZE:
                _CACHE.popitem(last=False)
        else:
            _CACHE.move_to_end(key)
        return vs

    @classmethod
    def dense(cls, resolution: int) -> "VoxelSet":
        return cls.shared(resolution, keys_to_ijk(np.arange(resolution**3), resolution))

    @classmethod
    def from_grid(cls, grid: SparseVoxelGrid) -> "VoxelSet":
        return cls.shared(grid.resolution, grid.indices)

    def lookup(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        flat = ijk.reshape(-1, 3)
        out = np.full(len(flat), -1, dtype=np.int64)
        inside = np.all((flat >= 0) & (flat < self.resolution), axis=1)
        if len(self) and inside.any():
            q = linear_keys(flat[inside], self.resolution)
            pos = np.clip(np.searchsorted(self._sorted, q), 0, len(self) - 1)
            hit = self._sorted[pos] == q
            out[inside] = np.where(hit, self._order[pos], -1)
        return out.reshape(ijk.shape[:-1])

    def neighbors(self) -> np.ndarray:
        """(N, 27) rows of the 3x3x3 neighbourhood, -1 where inactive."""
        if self._nbr is None:
            self._nbr = self.lookup(self.ijk[:, None, :] + OFFSETS_27[None])
        return self._nbr

    def parents(self) -> tuple["VoxelSet", np.ndarray]:
        """Parent set at half resolution and its (Np, 8) child-row table."""
        if self._parents is None:
            r = self.resolution // 2
            pkeys = np.unique(linear_keys(self.ijk // 2, r))
            parent = VoxelSet(r, keys_to_ijk(pkeys, r))
            table = self.lookup(parent.ijk[:, None, :] * 2 + OFFSETS_8[None])
            self._parents = (parent, table)
        return self._parents

    def children(self, rows: np.ndarray | None = None) -> "VoxelSet":
        """All 8 children of the selected rows, parent-major then slot order."""
        ijk = self.ijk if rows is None else self.ijk[np.asarray(rows)]
        return VoxelSet.shared(self.resolution * 2, (ijk[:, None, :] * 2 + OFFSETS_8[None]).reshape(-1, 3))

    def rows_in(self, other: "VoxelSet") -> np.ndarray:
        """Row in ``other`` of each voxel of this set (-1 when absent)."""
        return other.lookup(self.ijk)

    def labels_from(self, grid: SparseVoxelGrid) -> np.ndarray:
        """1.0 where the voxel is occupied in ``grid`` (same resolution)."""
        return (grid.lookup(self.ijk) >= 0).astype(np.float64)

    def to_grid(self, features: np.ndarray | None = None, rows: np.ndarray | None = None) -> SparseVoxelGrid:
        sel = np.arange(len(self)) if rows is None else np.asarray(rows)
        feats = np.zeros((len(sel), 0)) if features is None else np.asarray(features)[sel]
        return SparseVoxelGrid(self.resolution, self.ijk[sel], feats)
