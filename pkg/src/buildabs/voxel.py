"""Sparse voxel grids over the normalised cube [-1, 1]^3.

Index convention: a point p maps to floor((p + 1) * R / 2), clamped to
[0, R - 1]; voxel (i, j, k) has centre 2 * (idx + 0.5) / R - 1.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCloud, EmptyGrid, FormatError, MissingNormals, ResolutionTooLarge
from .geometry import PointCloud

DENSE_BUDGET = 256**3
GRID_MAGIC = b"LCVG"

_OFFSETS_8 = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64)
_OFFSETS_27 = np.array(
    [[a, b, c] for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64
)


def linear_keys(ijk: np.ndarray, resolution: int) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64)
    return (ijk[:, 0] * resolution + ijk[:, 1]) * resolution + ijk[:, 2]


def keys_to_ijk(keys: np.ndarray, resolution: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    r = resolution
    return np.stack([keys // (r * r), (keys // r) % r, keys % r], axis=1)


@dataclass(frozen=True)
class SparseVoxelGrid:
    resolution: int
    indices: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        r = int(self.resolution)
        if r < 1 or r & (r - 1):
            raise ValueError("resolution must be a power of two")
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(idx), -1) if len(idx) else np.zeros((0, 0))
        if len(feats) != len(idx):
            raise ValueError("features and indices differ in length")
        if len(idx) and (idx.min() < 0 or idx.max() >= r):
            raise ValueError("voxel index outside the grid")
        if not np.all(np.isfinite(feats)):
            raise ValueError("voxel features must be finite")
        keys = linear_keys(idx, r)
        order = np.argsort(keys, kind="stable")
        if len(keys) and np.any(np.diff(keys[order]) == 0):
            raise ValueError("duplicate voxel index")
        object.__setattr__(self, "resolution", r)
        object.__setattr__(self, "indices", idx[order])
        object.__setattr__(self, "features", feats[order])

    @classmethod
    def empty(cls, resolution: int, channels: int = 0) -> "SparseVoxelGrid":
        return cls(resolution, np.zeros((0, 3), np.int64), np.zeros((0, channels)))

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return linear_keys(self.indices, self.resolution)

    def lookup(self, ijk: np.ndarray) -> np.ndarray:
        """Row of each queried index in this grid, or -1 where unoccupied."""
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(ijk), -1, dtype=np.int64)
        inside = np.all((ijk >= 0) & (ijk < self.resolution), axis=1)
        if not len(self) or not inside.any():
            return out
        keys = self.keys
        q = linear_keys(ijk[inside], self.resolution)
        pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
        out[inside] = np.where(keys[pos] == q, pos, -1)
        return out

    def with_features(self, features) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.resolution, self.indices, features)

    def same_support(self, other: "SparseVoxelGrid") -> bool:
        return self.resolution == other.resolution and np.array_equal(self.indices, other.indices)


@dataclass(frozen=True)
class DenseGrid:
    resolution: int
    occupancy: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=np.float64)
        r = self.resolution
        if occ.shape != (r, r, r):
            raise ValueError("occupancy volume has the wrong shape")
        if not np.all(np.isfinite(occ)) or occ.min(initial=0) < 0 or occ.max(initial=0) > 1:
            raise ValueError("occupancy values must be finite and in [0, 1]")
        object.__setattr__(self, "occupancy", occ)
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float64)
            if f.shape[:3] != (r, r, r) or not np.all(np.isfinite(f)):
                raise ValueError("bad feature volume")
            object.__setattr__(self, "features", f)


def point_to_index(positions: np.ndarray, resolution: int) -> np.ndarray:
    idx = np.floor((np.asarray(positions, dtype=np.float64) + 1.0) * resolution / 2.0)
    return np.clip(idx, 0, resolution - 1).astype(np.int64)


def index_to_point(indices: np.ndarray, resolution: int) -> np.ndarray:
    return 2.0 * (np.asarray(indices, dtype=np.float64) + 0.5) / resolution - 1.0


def voxelize(cloud: PointCloud, resolution: int) -> SparseVoxelGrid:
    if len(cloud) == 0:
        raise EmptyCloud("cannot voxelise an empty cloud")
    keys = np.unique(linear_keys(point_to_index(cloud.positions, resolution), resolution))
    return SparseVoxelGrid(resolution, keys_to_ijk(keys, resolution), np.zeros((len(keys), 0)))


def dilate(grid: SparseVoxelGrid, rings: int = 1) -> SparseVoxelGrid:
    """Occupied set grown by ``rings`` voxels in the 26-neighbourhood; features dropped."""
    keys = grid.keys
    ijk = grid.indices
    for _ in range(rings):
        cand = (ijk[:, None, :] + _OFFSETS_27[None]).reshape(-1, 3)
        cand = cand[np.all((cand >= 0) & (cand < grid.resolution), axis=1)]
        keys = np.unique(linear_keys(cand, grid.resolution))
        ijk = keys_to_ijk(keys, grid.resolution)
    return SparseVoxelGrid(grid.resolution, ijk, np.zeros((len(ijk), 0)))


def trilinear_corners(positions: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """The 8 surrounding voxel centres of each point and their trilinear weights.

    Corners past the grid boundary are clamped onto it, so the weights of
    every point always sum to one.
    """
    c = (np.asarray(positions, dtype=np.float64) + 1.0) * resolution / 2.0 - 0.5
    base = np.floor(c).astype(np.int64)
    frac = c - base
    corners = base[:, None, :] + _OFFSETS_8[None]
    w = np.where(_OFFSETS_8[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
    return np.clip(corners, 0, resolution - 1), w


def splat_normals(cloud: PointCloud, grid: SparseVoxelGrid) -> SparseVoxelGrid:
    """Trilinearly splat point normals onto ``grid`` dilated by one ring.

    Accumulated vectors are rescaled to unit length. Voxels that receive no
    weight are pruned. Where unoriented normals cancel to (near) zero, the
    single heaviest contribution is used instead.
    """
    if not cloud.has_normals:
        raise MissingNormals("splatting needs per-point normals")
    if len(cloud) == 0:
        raise EmptyCloud("cannot splat an empty cloud")
    target = dilate(grid, 1)
    r = grid.resolution
    corners, w = trilinear_corners(cloud.positions, r)
    rows = target.lookup(corners.reshape(-1, 3))
    w = w.reshape(-1)
    contrib = np.repeat(cloud.normals, 8, axis=0) * w[:, None]
    ok = (rows >= 0) & (w > 0)
    rows, w, contrib = rows[ok], w[ok], contrib[ok]
    n = len(target)
    acc = np.zeros((n, 3))
    np.add.at(acc, rows, contrib)
    weight = np.bincount(rows, weights=w, minlength=n)
    norm = np.linalg.norm(acc, axis=1)
    degenerate = (weight > 0) & (norm < 1e-12 * np.maximum(weight, 1.0))
    if degenerate.any():
        # heaviest single contribution per degenerate voxel
        order = np.lexsort((-w, rows))
        first = order[np.r_[True, rows[order][1:] != rows[order][:-1]]]
        best = np.zeros((n, 3))
        best[rows[first]] = contrib[first]
        acc[degenerate] = best[degenerate]
        norm = np.linalg.norm(acc, axis=1)
    keep = weight > 0
    feats = acc[keep] / norm[keep, None]
    return SparseVoxelGrid(r, target.indices[keep], feats)


def normal_grid(cloud: PointCloud, resolution: int) -> SparseVoxelGrid:
    """Occupancy of ``cloud`` at ``resolution`` carrying splatted unit normals."""
    occ = voxelize(cloud, resolution)
    splat = splat_normals(cloud, occ)
    rows = splat.lookup(occ.indices)
    return SparseVoxelGrid(resolution, occ.indices, splat.features[rows])


def voxel_centers_to_points(grid: SparseVoxelGrid) -> PointCloud:
    if len(grid) == 0:
        raise EmptyGrid("grid has no occupied voxels")
    normals = grid.features if grid.channels == 3 else None
    return PointCloud(index_to_point(grid.indices, grid.resolution), normals)


def densify(grid: SparseVoxelGrid, budget: int = DENSE_BUDGET) -> DenseGrid:
    r = grid.resolution
    if r**3 > budget:
        raise ResolutionTooLarge(f"{r}^3 voxels exceed the dense budget of {budget}")
    occ = np.zeros((r, r, r))
    i, j, k = grid.indices.T
    occ[i, j, k] = 1.0
    feats = None
    if grid.channels:
        feats = np.zeros((r, r, r, grid.channels))
        feats[i, j, k] = grid.features
    return DenseGrid(r, occ, feats)


def sparsify(dense: DenseGrid, threshold: float = 0.5) -> SparseVoxelGrid:
    ijk = np.argwhere(dense.occupancy >= threshold)
    if dense.features is not None:
        feats = dense.features[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
    else:
        feats = np.zeros((len(ijk), 0))
    return SparseVoxelGrid(dense.resolution, ijk, feats)


def downsample(grid: SparseVoxelGrid, factor: int = 2) -> SparseVoxelGrid:
    """Parent occupancy: a coarse voxel is occupied if any child is."""
    r = grid.resolution // factor
    keys = np.unique(linear_keys(grid.indices // factor, r))
    return SparseVoxelGrid(r, keys_to_ijk(keys, r), np.zeros((len(keys), 0)))


def iou(a: SparseVoxelGrid, b: SparseVoxelGrid) -> float:
    if a.resolution != b.resolution:
        raise ValueError("grids have different resolutions")
    ka, kb = a.keys, b.keys
    union = len(np.union1d(ka, kb))
    return 1.0 if union == 0 else len(np.intersect1d(ka, kb)) / union


def save_grid(path, grid: SparseVoxelGrid) -> None:
    if grid.resolution > 65536:
        raise ValueError("indices do not fit in u16")
    manifest = {"resolution": grid.resolution, "channels": grid.channels, "count": len(grid)}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(grid.indices.astype("<u2").tobytes())
        fh.write(grid.features.astype("<f4").tobytes())


def load_grid(path) -> SparseVoxelGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: bad grid magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + hlen])
    n, c = manifest["count"], manifest["channels"]
    off = 8 + hlen
    idx = np.frombuffer(raw, dtype="<u2", count=3 * n, offset=off).reshape(n, 3)
    off += 6 * n
    feats = np.frombuffer(raw, dtype="<f4", count=c * n, offset=off).reshape(n, c)
    return SparseVoxelGrid(manifest["resolution"], idx.astype(np.int64), feats.astype(np.float64))
