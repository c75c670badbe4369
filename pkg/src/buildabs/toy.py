"""Procedural low-poly buildings used as fixtures and as the toy training set.

All faces are wound counter-clockwise seen from outside.
"""
from __future__ import annotations

import numpy as np

from .geometry import PolyMesh, normalize_mesh, triangulate_fan
from .rng import make_rng


def prism(footprint, height: float) -> PolyMesh:
    """Flat-roofed extrusion of a CCW footprint polygon."""
    fp = np.asarray(footprint, dtype=np.float64)
    n = len(fp)
    verts = np.vstack([np.c_[fp, np.zeros(n)], np.c_[fp, np.full(n, height)]])
    faces = [list(range(n - 1, -1, -1)), list(range(n, 2 * n))]
    faces += [[i, (i + 1) % n, (i + 1) % n + n, i + n] for i in range(n)]
    return PolyMesh(verts, faces)


def box(w: float, d: float, h: float) -> PolyMesh:
    return prism([[-w / 2, -d / 2], [w / 2, -d / 2], [w / 2, d / 2], [-w / 2, d / 2]], h)


def l_prism(w: float, d: float, cut_w: float, cut_d: float, h: float) -> PolyMesh:
    fp = [[0, 0], [w, 0], [w, d - cut_d], [w - cut_w, d - cut_d], [w - cut_w, d], [0, d]]
    return prism(fp, h)


def gable(w: float, d: float, h: float, rise: float) -> PolyMesh:
    x, y = w / 2, d / 2
    v = [
        [-x, -y, 0], [x, -y, 0], [x, y, 0], [-x, y, 0],
        [-x, -y, h], [x, -y, h], [x, y, h], [-x, y, h],
        [-x, 0, h + rise], [x, 0, h + rise],
    ]
    f = [
        [3, 2, 1, 0],
        [0, 1, 5, 4],
        [2, 3, 7, 6],
        [1, 2, 6, 9, 5],
        [3, 0, 4, 8, 7],
        [4, 5, 9, 8],
        [6, 7, 8, 9],
    ]
    return PolyMesh(v, f)


def hip(w: float, d: float, h: float, rise: float) -> PolyMesh:
    x, y = w / 2, d / 2
    r = max(x - y, 0.1 * x)
    v = [
        [-x, -y, 0], [x, -y, 0], [x, y, 0], [-x, y, 0],
        [-x, -y, h], [x, -y, h], [x, y, h], [-x, y, h],
        [-r, 0, h + rise], [r, 0, h + rise],
    ]
    f = [
        [3, 2, 1, 0],
        [0, 1, 5, 4], [1, 2, 6, 5], [2, 3, 7, 6], [3, 0, 4, 7],
        [4, 5, 9, 8], [6, 7, 8, 9], [5, 6, 9], [7, 4, 8],
    ]
    return PolyMesh(v, f)


def shed(w: float, d: float, h: float, rise: float) -> PolyMesh:
    x, y = w / 2, d / 2
    v = [
        [-x, -y, 0], [x, -y, 0], [x, y, 0], [-x, y, 0],
        [-x, -y, h], [x, -y, h], [x, y, h + rise], [-x, y, h + rise],
    ]
    f = [[3, 2, 1, 0], [4, 5, 6, 7], [0, 1, 5, 4], [1, 2, 6, 5], [2, 3, 7, 6], [3, 0, 4, 7]]
    return PolyMesh(v, f)


def pyramid_roof(w: float, h: float, rise: float) -> PolyMesh:
    x = w / 2
    v = [
        [-x, -x, 0], [x, -x, 0], [x, x, 0], [-x, x, 0],
        [-x, -x, h], [x, -x, h], [x, x, h], [-x, x, h],
        [0, 0, h + rise],
    ]
    f = [
        [3, 2, 1, 0],
        [0, 1, 5, 4], [1, 2, 6, 5], [2, 3, 7, 6], [3, 0, 4, 7],
        [4, 5, 8], [5, 6, 8], [6, 7, 8], [7, 4, 8],
    ]
    return PolyMesh(v, f)


def cube() -> PolyMesh:
    return box(2.0, 2.0, 2.0)


def tetrahedron() -> PolyMesh:
    v = [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]
    return PolyMesh(v, [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])


def signed_volume(mesh: PolyMesh) -> float:
    tri, _ = triangulate_fan(mesh)
    t = tri.triangles()
    v = tri.vertices
    return float(np.einsum("ij,ij->i", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0)


KINDS = ("box", "gable", "hip", "l_prism", "shed", "pyramid")


def make_building(kind: str, rng: np.random.Generator) -> PolyMesh:
    w = rng.uniform(8.0, 16.0)
    d = rng.uniform(6.0, 0.85 * w)
    h = rng.uniform(4.0, 9.0)
    rise = rng.uniform(2.0, 4.0)
    if kind == "box":
        return box(w, d, h)
    if kind == "gable":
        return gable(w, d, h, rise)
    if kind == "hip":
        return hip(w, d, h, rise)
    if kind == "l_prism":
        return l_prism(w, d, rng.uniform(0.3, 0.6) * w, rng.uniform(0.3, 0.6) * d, h)
    if kind == "shed":
        return shed(w, d, h, rise * 0.6)
    if kind == "pyramid":
        return pyramid_roof(w, h, rise)
    raise ValueError(f"unknown building kind {kind!r}")


def toy_buildings(n: int, seed: int = 0) -> list[tuple[str, PolyMesh]]:
    """``n`` normalised buildings cycling through every roof type."""
    out = []
    for i in range(n):
        kind = KINDS[i % len(KINDS)]
        mesh, _ = normalize_mesh(make_building(kind, make_rng(seed, "toy", i)))
        out.append((f"{kind}_{i:03d}", mesh))
    return out
