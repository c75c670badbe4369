"""Point-cloud and polygon-mesh primitives.

Clouds are normalised into [-1, 1]^3 before anything else touches them;
meshes are fan-triangulated and sampled by area.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyMesh, TooFewPoints
from .rng import make_rng

DEGENERATE_EXTENT = 1e-9
AREA_EPS = 1e-12


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        object.__setattr__(self, "positions", pos)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pos):
                raise ValueError("normals and positions differ in length")
            if not np.all(np.isfinite(nrm)):
                raise ValueError("normals must be finite")
            object.__setattr__(self, "normals", nrm)
        pos.flags.writeable = False
        if self.normals is not None:
            self.normals.flags.writeable = False

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.positions[idx], None if self.normals is None else self.normals[idx]
        )

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.positions, normals)


@dataclass(frozen=True)
class PolyMesh:
    """Vertices plus polygonal faces (lists of vertex indices).

    Construction does not reject bad faces: meshes read from disk or
    produced by a generator may carry them, and ``triangulate_fan`` is the
    place where they get dropped.
    """

    vertices: np.ndarray
    faces: tuple = field(default_factory=tuple)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", tuple(tuple(int(i) for i in f) for f in self.faces))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_triangulated(self) -> bool:
        return all(len(f) == 3 for f in self.faces)

    def triangles(self) -> np.ndarray:
        if not self.faces:
            return np.zeros((0, 3), dtype=np.int64)
        return np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def validate(self) -> list[str]:
        problems = []
        if not np.all(np.isfinite(self.vertices)):
            problems.append("non-finite vertex")
        n = len(self.vertices)
        for fi, f in enumerate(self.faces):
            if len(f) < 3:
                problems.append(f"face {fi} has fewer than 3 vertices")
            if any(i < 0 or i >= n for i in f):
                problems.append(f"face {fi} has an out-of-range index")
            if any(f[i] == f[(i + 1) % len(f)] for i in range(len(f))):
                problems.append(f"face {fi} repeats a vertex")
        return problems


@dataclass(frozen=True)
class NormalizationTransform:
    """normalized = (world + translation) / scale"""

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale - self.translation

    def to_dict(self) -> dict:
        return {"translation": self.translation.tolist(), "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationTransform":
        return cls(np.asarray(d["translation"]), float(d["scale"]))


def _transform_for(points: np.ndarray, centre: np.ndarray) -> NormalizationTransform:
    extent = np.max(np.abs(points - centre)) if len(points) else 0.0
    scale = float(extent) if extent >= DEGENERATE_EXTENT else 1.0
    return NormalizationTransform(-centre, scale)


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Centre on the centroid and scale the largest absolute coordinate to 1."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot normalise an empty cloud")
    tf = _transform_for(cloud.positions, cloud.positions.mean(axis=0))
    return PointCloud(tf.apply(cloud.positions), cloud.normals), tf


def triangle_areas(vertices: np.ndarray, tris: np.ndarray) -> np.ndarray:
    if len(tris) == 0:
        return np.zeros(0)
    a, b, c = vertices[tris[:, 0]], vertices[tris[:, 1]], vertices[tris[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def normalize_mesh(mesh: PolyMesh) -> tuple[PolyMesh, NormalizationTransform]:
    """Normalise a mesh by its surface centroid so all vertices land in [-1, 1]^3.

    The centroid is the exact area-weighted one; the scale is taken from the
    vertices, which bound the surface.
    """
    if mesh.n_vertices == 0:
        raise EmptyMesh("mesh has no vertices")
    tri, _ = triangulate_fan(mesh)
    tris = tri.triangles()
    areas = triangle_areas(tri.vertices, tris)
    if areas.sum() > AREA_EPS:
        centres = tri.vertices[tris].mean(axis=1)
        centroid = (areas[:, None] * centres).sum(axis=0) / areas.sum()
    else:
        centroid = mesh.vertices.mean(axis=0)
    tf = _transform_for(mesh.vertices, centroid)
    return PolyMesh(tf.apply(mesh.vertices), mesh.faces), tf


def knn(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest neighbours of every point, the point itself first."""
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    return idx.reshape(len(points), k)


def estimate_normals(cloud: PointCloud, k: int = 30) -> PointCloud:
    """Unoriented normals from the smallest principal axis of each k-neighbourhood.

    Each neighbourhood is the point plus its k nearest neighbours, with
    uniform weights. Clouds with no more than k points use every point.
    """
    n = len(cloud)
    if n < 2:
        raise TooFewPoints(f"normal estimation needs at least 2 points, got {n}")
    kk = min(k + 1, n)
    idx = knn(cloud.positions, kk)
    nb = cloud.positions[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / kk
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.positions, normals)


def orient_normals(cloud: PointCloud, reference: np.ndarray | None = None) -> PointCloud:
    """Flip normals to agree with ``reference`` directions.

    Without a reference the direction away from the centroid is used, which
    is right for convex shapes and most building walls and roofs.
    """
    if not cloud.has_normals:
        return cloud
    ref = cloud.positions - cloud.positions.mean(axis=0) if reference is None else np.asarray(reference)
    flip = (cloud.normals * ref).sum(axis=1) < 0
    return PointCloud(cloud.positions, np.where(flip[:, None], -cloud.normals, cloud.normals))


def triangulate_fan(mesh: PolyMesh) -> tuple[PolyMesh, int]:
    """Split every polygon (v0, ..., vn-1) into triangles (v0, vi, vi+1).

    Returns the triangle mesh and the number of input faces dropped for
    having out-of-range indices or fewer than three distinct corners after
    collapsing consecutive repeats.
    """
    n = mesh.n_vertices
    tris: list[tuple[int, int, int]] = []
    dropped = 0
    for face in mesh.faces:
        if any(i < 0 or i >= n for i in face):
            dropped += 1
            continue
        ring = [face[0]]
        for i in face[1:]:
            if i != ring[-1]:
                ring.append(i)
        while len(ring) > 1 and ring[-1] == ring[0]:
            ring.pop()
        if len(ring) < 3:
            dropped += 1
            continue
        for i in range(1, len(ring) - 1):
            tris.append((ring[0], ring[i], ring[i + 1]))
    return PolyMesh(mesh.vertices, tris), dropped


def sample_surface(
    mesh: PolyMesh, n: int, seed: int = 0, return_faces: bool = False
):
    """Area-weighted uniform samples on the triangulated surface.

    Falls back to drawing vertices when the mesh has no usable area.
    With ``return_faces`` the triangle index of every sample is returned as
    well (-1 for vertex-fallback samples).
    """
    if n < 1:
        raise ValueError("sample count must be at least 1")
    if mesh.n_vertices == 0:
        raise EmptyMesh("mesh has no vertices")
    rng = make_rng(seed, "sample_surface")
    tri, _ = triangulate_fan(mesh)
    tris = tri.triangles()
    areas = triangle_areas(tri.vertices, tris)
    total = areas.sum()
    if len(tris) == 0 or total < AREA_EPS:
        pick = rng.integers(0, mesh.n_vertices, size=n)
        cloud = PointCloud(mesh.vertices[pick])
        return (cloud, np.full(n, -1)) if return_faces else cloud
    face = rng.choice(len(tris), size=n, p=areas / total)
    r = rng.random((n, 2))
    fold = r.sum(axis=1) > 1.0
    r[fold] = 1.0 - r[fold]
    a, b, c = (tri.vertices[tris[face, i]] for i in range(3))
    pts = a + r[:, :1] * (b - a) + r[:, 1:] * (c - a)
    fn = np.cross(b - a, c - a)
    ln = np.linalg.norm(fn, axis=1, keepdims=True)
    normals = np.where(ln > 0, fn / np.where(ln > 0, ln, 1.0), np.array([0.0, 0.0, 1.0]))
    cloud = PointCloud(pts, normals)
    return (cloud, face) if return_faces else cloud


def bounding_box(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return points.min(axis=0), points.max(axis=0)
