"""Turn a normalised ground-truth mesh into training tensors: dense surface
samples with kNN normals, coarse/fine normal grids and mesh tokens."""
from __future__ import annotations

from dataclasses import dataclass

from .geometry import PointCloud, PolyMesh, estimate_normals, orient_normals, sample_surface, triangulate_fan
from .tokenizer import TokenSequence, Vocabulary, tokenize_mesh
from .voxel import SparseVoxelGrid, normal_grid


@dataclass
class Sample:
    id: str
    mesh: PolyMesh
    gt: PointCloud
    coarse: SparseVoxelGrid
    fine: SparseVoxelGrid
    tokens: TokenSequence


def ground_truth_cloud(mesh: PolyMesh, n_points: int = 20000, seed: int = 0, k: int = 30) -> PointCloud:
    """Surface samples with 30-NN normals, oriented to agree with the face normals."""
    sampled = sample_surface(mesh, n_points, seed)
    est = estimate_normals(PointCloud(sampled.positions), k)
    return orient_normals(est, sampled.normals)


def prepare_sample(
    sid: str,
    mesh: PolyMesh,
    coarse_res: int = 16,
    fine_res: int = 64,
    n_points: int = 20000,
    seed: int = 0,
    vocab: Vocabulary | None = None,
) -> Sample:
    gt = ground_truth_cloud(mesh, n_points, seed)
    tri, _ = triangulate_fan(mesh)
    return Sample(
        sid,
        mesh,
        gt,
        normal_grid(gt, coarse_res),
        normal_grid(gt, fine_res),
        tokenize_mesh(tri, vocab or Vocabulary()),
    )
