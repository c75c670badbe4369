"""End-to-end inference: input cloud -> coarse prior -> fine prior -> P_out
-> prompt -> mesh tokens -> mesh."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from ..errors import BuildAbsError, EmptyCloud, EmptyGrid, StageFailure
from ..geometry import PointCloud, PolyMesh, estimate_normals, orient_normals
from ..tokenizer import TokenSequence, ValidationReport, Vocabulary, detokenize_mesh, validate_generated
from ..voxel import SparseVoxelGrid, normal_grid, voxel_centers_to_points
from . import autodiff as ad
from .ar import ar_generate
from .config import ModelConfig
from .diffusion import DiffusionSchedule, diffusion_sample, latent_scale, stage_condition
from .nn import ParamStore
from .sparse import VoxelSet
from .vae import latent_support, vae_decode

STAGES = ("input", "coarse", "fine", "ar", "decode")


@dataclass
class GenerateConfig:
    skip_coarse: bool = False  # coarse grid straight from the input cloud
    skip_fine: bool = False  # P_out from the coarse grid
    no_priors: bool = False  # P_out = P_in
    max_len: int | None = None
    temperature: float = 0.0
    seed: int = 0
    normal_k: int = 30

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GenerationResult:
    p_out: PointCloud
    mesh: PolyMesh
    tokens: TokenSequence
    report: ValidationReport
    coarse: SparseVoxelGrid | None = None
    fine: SparseVoxelGrid | None = None
    dropped_faces: int = 0
    flags: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            **self.report.to_dict(),
            "tokens": len(self.tokens),
            "p_out_points": len(self.p_out),
            "vertices": self.mesh.n_vertices,
            "faces": self.mesh.n_faces,
            "dropped_faces": self.dropped_faces,
            "flags": self.flags,
        }


def with_estimated_normals(cloud: PointCloud, k: int = 30) -> PointCloud:
    """kNN normals oriented away from the centroid."""
    return orient_normals(estimate_normals(PointCloud(cloud.positions), k))


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, err, tb):
        if err is not None and isinstance(err, BuildAbsError) and not isinstance(err, StageFailure):
            raise StageFailure(self.name, f"{type(err).__name__}: {err}") from err
        return False


def _sample_level(level: str, support: VoxelSet, inputs: dict, p: dict, cfg: ModelConfig, sched, seed: int) -> SparseVoxelGrid:
    cond = stage_condition(inputs, support, level, p, cfg)
    z = diffusion_sample(p, cond, support, sched, seed, level, cfg)
    z = z.with_values(z.mu.data / latent_scale(p, level))
    grid = vae_decode(z, level, p, cfg).grid
    if len(grid) == 0:
        raise EmptyGrid(f"{level} decoder pruned every voxel")
    return grid


def generate_pipeline(p_in: PointCloud, params: ParamStore, cfg: ModelConfig, gen: GenerateConfig | None = None) -> GenerationResult:
    """Run every stage on a normalised input cloud.

    Errors raised inside a stage surface as ``StageFailure`` carrying the
    stage name; an unfinished or NaN mesh is not an error but a failed
    validation report.
    """
    gen = gen or GenerateConfig()
    flags = {k: getattr(gen, k) for k in ("skip_coarse", "skip_fine", "no_priors")}
    p = params.tensors("", trainable=False)
    sched = DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    coarse = fine = None
    with ad.no_grad():
        with _Stage("input"):
            if len(p_in) == 0:
                raise EmptyCloud("input cloud is empty")
            oriented = with_estimated_normals(p_in, gen.normal_k)
        if gen.no_priors:
            p_out = oriented
        else:
            with _Stage("coarse"):
                if gen.skip_coarse:
                    coarse = normal_grid(oriented, cfg.coarse_res)
                else:
                    support = latent_support("coarse", None, cfg)
                    coarse = _sample_level("coarse", support, {"p_in": p_in}, p, cfg, sched, gen.seed)
            if gen.skip_fine:
                with _Stage("fine"):
                    p_out = voxel_centers_to_points(coarse)
            else:
                with _Stage("fine"):
                    support = latent_support("fine", coarse, cfg)
                    fine = _sample_level("fine", support, {"p_in": p_in, "coarse": coarse}, p, cfg, sched, gen.seed)
                    p_out = voxel_centers_to_points(fine)
        with _Stage("ar"):
            seq = ar_generate(p, p_out, cfg, gen.max_len, gen.temperature, gen.seed)
    with _Stage("decode"):
        vocab = Vocabulary(cfg.coord_bins)
        decoded = detokenize_mesh(seq, vocab, strict=False)
        report = validate_generated(seq, decoded.mesh, vocab)
    return GenerationResult(p_out, decoded.mesh, seq, report, coarse, fine, decoded.dropped_faces, flags)

