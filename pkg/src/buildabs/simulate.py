"""Synthetic degradation of ground-truth building samples.

Two scenarios: ``sfm`` (saliency-weighted resampling, Gaussian jitter and
uniform outliers) and ``sparse`` (anchor-driven neighbourhood removal down
to 200-2000 points, then uniform or Perlin displacement).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import MissingNormals, SourceTooSmall
from .geometry import PointCloud, PolyMesh, triangulate_fan
from .rng import make_rng

# The 12 cube-edge directions, scaled to unit length.
_GRADIENTS = np.array(
    [[1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0],
     [1, 0, 1], [-1, 0, 1], [1, 0, -1], [-1, 0, -1],
     [0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1]],
    dtype=np.float64,
) / np.sqrt(2.0)


@dataclass
class SfmConfig:
    noise_sigma: float = 0.01
    outlier_fraction: float = 0.05
    saliency_edge_weight: float = 2.0
    saliency_up_weight: float = 1.0
    target_count: int = 2048
    dihedral_deg: float = 30.0
    edge_band: float = 0.02


@dataclass
class SparseConfig:
    count_min: int = 200
    count_max: int = 2000
    anchor_count: int = 10_000
    removal_radius: float = 0.15
    noise_kind: str = "uniform"
    noise_amplitude: float = 0.005
    perlin_frequency: float = 4.0


@dataclass
class ScenarioConfig:
    scenario: str = "sparse"
    seed: int = 0
    sfm: SfmConfig = field(default_factory=SfmConfig)
    sparse: SparseConfig = field(default_factory=SparseConfig)

    def __post_init__(self):
        if isinstance(self.sfm, dict):
            self.sfm = SfmConfig(**self.sfm)
        if isinstance(self.sparse, dict):
            self.sparse = SparseConfig(**self.sparse)
        if self.scenario not in ("sfm", "sparse"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        s, f = self.sparse, self.sfm
        if not 1 <= s.count_min <= s.count_max:
            raise ValueError("need 1 <= count_min <= count_max")
        if not 0.0 <= f.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")
        if min(f.noise_sigma, s.noise_amplitude, s.removal_radius, f.edge_band) < 0:
            raise ValueError("amplitudes and radii must be non-negative")
        if s.noise_kind not in ("uniform", "perlin"):
            raise ValueError(f"unknown noise kind {s.noise_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Perlin noise


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _permutation(seed: int) -> np.ndarray:
    perm = make_rng(seed, "perlin").permutation(256)
    return np.concatenate([perm, perm])


def perlin3(p, frequency: float = 1.0, seed: int = 0):
    """Gradient-lattice noise in [-1, 1]; zero on every integer lattice point.

    ``p`` may be a single 3-vector or an (N, 3) array.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3) * frequency
    perm = _permutation(seed)
    cell = np.floor(pts)
    f = pts - cell
    ci = cell.astype(np.int64) & 255
    u, v, w = (_fade(f[:, a]) for a in range(3))

    def corner(dx, dy, dz):
        h = perm[perm[perm[ci[:, 0] + dx] + ci[:, 1] + dy] + ci[:, 2] + dz] % 12
        return (_GRADIENTS[h] * (f - np.array([dx, dy, dz]))).sum(axis=1)

    def lerp(a, b, t):
        return a + t * (b - a)

    x00 = lerp(corner(0, 0, 0), corner(1, 0, 0), u)
    x10 = lerp(corner(0, 1, 0), corner(1, 1, 0), u)
    x01 = lerp(corner(0, 0, 1), corner(1, 0, 1), u)
    x11 = lerp(corner(0, 1, 1), corner(1, 1, 1), u)
    out = lerp(lerp(x00, x10, v), lerp(x01, x11, v), w)
    return float(out[0]) if single else out


# --------------------------------------------------------------------------
# SfM scenario


def sharp_edges(mesh: PolyMesh, dihedral_deg: float = 30.0) -> np.ndarray:
    """Segments (E, 2, 3) of mesh edges whose dihedral angle exceeds the threshold.

    Vertices with identical coordinates are merged first. Boundary edges
    (one incident face) count as sharp.
    """
    tri, _ = triangulate_fan(mesh)
    tris = tri.triangles()
    if len(tris) == 0:
        return np.zeros((0, 2, 3))
    _, remap = np.unique(tri.vertices, axis=0, return_inverse=True)
    remap = remap.reshape(-1)
    tris = remap[tris]
    verts = np.zeros((remap.max() + 1, 3))
    verts[remap] = tri.vertices
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    fn = np.cross(b - a, c - a)
    ln = np.linalg.norm(fn, axis=1)
    good = ln > 1e-12
    tris, fn = tris[good], fn[good] / ln[good, None]
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    owner = np.tile(np.arange(len(tris)), 3)
    edges = np.sort(edges, axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    cos_thr = np.cos(np.deg2rad(dihedral_deg))
    sharp = []
    for e in range(len(uniq)):
        faces = owner[inv == e]
        if len(faces) < 2:
            sharp.append(e)
            continue
        normals = fn[faces]
        cos = normals @ normals.T
        if cos.min() < cos_thr:
            sharp.append(e)
    seg = uniq[np.asarray(sharp, dtype=np.int64)]
    return verts[seg]


def distance_to_segments(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    if len(segments) == 0:
        return np.full(len(points), np.inf)
    a, b = segments[:, 0], segments[:, 1]
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-300)
    best = np.full(len(points), np.inf)
    for lo in range(0, len(points), 4096):
        p = points[lo : lo + 4096, None, :]
        t = np.clip(((p - a) * ab).sum(axis=2) / denom, 0.0, 1.0)
        d = np.linalg.norm(p - (a + t[..., None] * ab), axis=2)
        best[lo : lo + 4096] = d.min(axis=1)
    return best


def saliency_weights(cloud: PointCloud, mesh: PolyMesh, cfg: ScenarioConfig) -> np.ndarray:
    """1 + w_edge * [near a sharp edge] + w_up * max(0, n_z), normalised to sum 1."""
    if not cloud.has_normals:
        raise MissingNormals("saliency weighting needs normals")
    s = cfg.sfm
    extent = np.ptp(cloud.positions, axis=0).max() if len(cloud) else 0.0
    edge = np.zeros(len(cloud))
    if s.saliency_edge_weight != 0:
        seg = sharp_edges(mesh, s.dihedral_deg)
        edge = (distance_to_segments(cloud.positions, seg) <= s.edge_band * extent).astype(np.float64)
    w = 1.0 + s.saliency_edge_weight * edge + s.saliency_up_weight * np.maximum(0.0, cloud.normals[:, 2])
    return w / w.sum()


def simulate_sfm(gt: PointCloud, mesh: PolyMesh, cfg: ScenarioConfig, return_outliers: bool = False):
    """Saliency-weighted resample, Gaussian jitter, then uniform outliers.

    Draws without replacement when ``target_count`` fits in ``gt``. The
    jitter standard deviation is ``noise_sigma`` times the largest absolute
    coordinate of ``gt`` (exactly ``noise_sigma`` for a normalised cloud). With
    ``return_outliers`` a boolean mask of replaced points is returned too.
    """
    s = cfg.sfm
    w = saliency_weights(gt, mesh, cfg)
    rng = make_rng(cfg.seed, "sfm")
    n = int(s.target_count)
    pick = rng.choice(len(gt), size=n, replace=n > len(gt), p=w)
    pts = gt.positions[pick].copy()
    lo, hi = gt.positions.min(axis=0), gt.positions.max(axis=0)
    centre, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    if s.noise_sigma > 0:
        pts += rng.normal(0.0, s.noise_sigma * np.abs(gt.positions).max(), size=pts.shape)
    n_out = int(round(s.outlier_fraction * n))
    mask = np.zeros(n, dtype=bool)
    if n_out:
        which = rng.choice(n, size=n_out, replace=False)
        box = 1.5 * np.maximum(half, 1e-9)
        pts[which] = centre + rng.uniform(-1.0, 1.0, size=(n_out, 3)) * box
        mask[which] = True
    out = PointCloud(pts)
    return (out, mask) if return_outliers else out


# --------------------------------------------------------------------------
# sparse scenario


def _displacement(pts: np.ndarray, s: SparseConfig, rng: np.random.Generator, seed: int) -> np.ndarray:
    if s.noise_amplitude == 0:
        return np.zeros_like(pts)
    if s.noise_kind == "uniform":
        return rng.uniform(-s.noise_amplitude, s.noise_amplitude, size=pts.shape)
    shifts = np.array([[0.0, 0.0, 0.0], [31.7, 17.3, 5.1], [11.3, 47.9, 23.5]])
    return s.noise_amplitude * np.stack(
        [perlin3(pts + shifts[a], s.perlin_frequency, seed + a) for a in range(3)], axis=1
    )


def simulate_sparse(gt: PointCloud, cfg: ScenarioConfig, return_count: bool = False):
    """Anchor-driven removal down to N ~ U{count_min..count_max}, then noise.

    Each anchor deletes every remaining point within ``removal_radius``;
    the final anchor deletes only its nearest points so exactly N survive.
    If ``anchor_count`` anchors do not suffice the rest is removed at random.
    """
    s = cfg.sparse
    if len(gt) <= s.count_max:
        raise SourceTooSmall(f"need more than {s.count_max} source points, got {len(gt)}")
    rng = make_rng(cfg.seed, "sparse")
    target = int(rng.integers(s.count_min, s.count_max + 1))
    alive = np.ones(len(gt), dtype=bool)
    remaining = len(gt)
    tree = cKDTree(gt.positions)
    if s.removal_radius > 0:
        for _ in range(s.anchor_count):
            if remaining <= target:
                break
            live = np.flatnonzero(alive)
            anchor = gt.positions[live[rng.integers(remaining)]]
            hood = np.asarray(tree.query_ball_point(anchor, s.removal_radius), dtype=np.int64)
            hood = hood[alive[hood]]
            excess = remaining - target
            if len(hood) > excess:
                d = np.linalg.norm(gt.positions[hood] - anchor, axis=1)
                hood = hood[np.lexsort((hood, d))[:excess]]
            alive[hood] = False
            remaining -= len(hood)
    keep = np.flatnonzero(alive)
    if len(keep) > target:
        keep = np.sort(rng.choice(keep, size=target, replace=False))
    pts = gt.positions[keep] + _displacement(gt.positions[keep], s, rng, cfg.seed)
    out = PointCloud(pts)
    return (out, target) if return_count else out


def simulate(gt: PointCloud, mesh: PolyMesh, cfg: ScenarioConfig) -> PointCloud:
    if cfg.scenario == "sfm":
        return simulate_sfm(gt, mesh, cfg)
    return simulate_sparse(gt, cfg)
