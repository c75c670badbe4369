"""Hierarchical sparse VAEs.

Both levels share one layout. The encoder convolves the occupied voxels,
halves the resolution, then scatters onto the latent support: the full
dense grid for the coarse level (densification at the bottleneck) and the
children of the coarse occupancy for the fine level. The decoder predicts
keep-logits on the latent support, prunes, upsamples the survivors by 2
and predicts keep-logits plus normals on the children.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import KindMismatch, ResolutionMismatch, ShapeMismatch
from ..rng import make_rng
from ..voxel import SparseVoxelGrid, downsample
from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .nn import ParamStore, linear, scatter_to, sparse_conv, strided_down, upsample
from .sparse import VoxelSet

LOGIT_CAP = 30.0
INIT_LOGVAR = -4.0


@dataclass
class LatentGrid:
    kind: str
    support: VoxelSet
    mu: Tensor
    logvar: Tensor | None = None

    @property
    def resolution(self) -> int:
        return self.support.resolution

    @property
    def channels(self) -> int:
        return self.mu.shape[1]

    @property
    def is_posterior(self) -> bool:
        return self.logvar is not None

    def values(self) -> np.ndarray:
        return self.mu.data

    def with_values(self, z) -> "LatentGrid":
        return LatentGrid(self.kind, self.support, ad.as_tensor(z))


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict
    weights: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.total.data)

    def to_dict(self) -> dict:
        return {"total": self.value, **{k: float(v) for k, v in self.components.items()}}


@dataclass
class DecodeStage:
    candidates: VoxelSet
    logits: Tensor
    kept: np.ndarray


@dataclass
class DecodeOutput:
    stages: list
    normals: Tensor
    grid: SparseVoxelGrid


def level_resolutions(level: str, cfg: ModelConfig) -> tuple[int, int]:
    """(input resolution, latent resolution)."""
    if level == "coarse":
        return cfg.coarse_res, cfg.coarse_res // 2
    if level == "fine":
        return cfg.fine_res, cfg.fine_res // 2
    raise ValueError(f"unknown level {level!r}")


def _width(level: str, cfg: ModelConfig) -> int:
    return cfg.vae_width if level == "coarse" else cfg.fine_vae_width


def init_vae(params: ParamStore, level: str, cfg: ModelConfig) -> None:
    w, lat = _width(level, cfg), cfg.latent_dim
    p = f"vae_{level}"
    params.linear(f"{p}.enc.c0", 27 * 4, w)
    params.linear(f"{p}.enc.down", 8 * w, w)
    params.linear(f"{p}.enc.c1", 27 * w, w)
    params.linear(f"{p}.enc.head", w, 2 * lat, scale=0.1)
    # start with a narrow posterior so the decoder sees the mean early on
    params.arrays[f"{p}.enc.head.b"][lat:] = INIT_LOGVAR
    params.linear(f"{p}.dec.c0", 27 * lat, w)
    params.linear(f"{p}.dec.c1", 27 * w, w)
    params.linear(f"{p}.dec.keep0", w, 1)
    params.linear(f"{p}.dec.up", w, 8 * w)
    params.linear(f"{p}.dec.c2", 27 * w, w)
    params.linear(f"{p}.dec.keep1", w, 1)
    params.linear(f"{p}.dec.normal", w, 3)


def latent_support(level: str, grid_or_coarse: SparseVoxelGrid | None, cfg: ModelConfig) -> VoxelSet:
    """Where the latent lives: dense for coarse, children of the coarse
    occupancy for fine (``grid_or_coarse`` may be the fine grid or the coarse one)."""
    _, lat_res = level_resolutions(level, cfg)
    if level == "coarse":
        return VoxelSet.dense(lat_res)
    coarse = grid_or_coarse
    if coarse.resolution == cfg.fine_res:
        coarse = downsample(coarse, 4)
    if coarse.resolution != cfg.coarse_res:
        raise ResolutionMismatch("fine support needs a coarse-resolution occupancy")
    return VoxelSet.from_grid(coarse).children()


def vae_encode(grid: SparseVoxelGrid, level: str, params: dict, cfg: ModelConfig, support: VoxelSet | None = None) -> LatentGrid:
    in_res, lat_res = level_resolutions(level, cfg)
    if grid.resolution != in_res:
        raise ResolutionMismatch(f"{level} VAE expects resolution {in_res}, got {grid.resolution}")
    p = f"vae_{level}"
    if support is None:
        support = latent_support(level, grid, cfg) if len(grid) or level == "coarse" else VoxelSet(lat_res, np.zeros((0, 3)))
    w = _width(level, cfg)
    if len(grid):
        vs = VoxelSet.from_grid(grid)
        feats = grid.features if grid.channels == 3 else np.zeros((len(grid), 3))
        x = Tensor(np.hstack([np.ones((len(grid), 1)), feats]))
        h = ad.silu(sparse_conv(x, vs, params, f"{p}.enc.c0"))
        h, parent = strided_down(h, vs, params, f"{p}.enc.down")
        h = scatter_to(ad.silu(h), parent, support)
    else:
        h = Tensor(np.zeros((len(support), w)))
    h = ad.silu(sparse_conv(h, support, params, f"{p}.enc.c1"))
    stats = linear(h, params, f"{p}.enc.head")
    lat = cfg.latent_dim
    mu, logvar = stats[:, :lat], ad.clip(stats[:, lat:], -LOGIT_CAP, LOGIT_CAP)
    return LatentGrid("dense" if level == "coarse" else "sparse", support, mu, logvar)


def sample_posterior(post: LatentGrid, seed: int) -> LatentGrid:
    """Reparameterised draw z = mu + sigma * eps (differentiable in mu, logvar)."""
    eps = make_rng(seed, "posterior").standard_normal(post.mu.shape)
    z = post.mu + ad.exp(post.logvar * 0.5) * eps
    return LatentGrid(post.kind, post.support, z)


def vae_decode(
    z: LatentGrid,
    level: str,
    params: dict,
    cfg: ModelConfig,
    target: SparseVoxelGrid | None = None,
    force: str | None = None,
) -> DecodeOutput:
    """Decode to occupancy + normals.

    With ``target`` the pruning follows the target occupancy (teacher
    forcing, used for training); otherwise voxels whose keep-probability is
    below 0.5 are pruned. ``force`` = "keep" / "prune" overrides the logits.
    """
    expected = "dense" if level == "coarse" else "sparse"
    if z.kind != expected:
        raise KindMismatch(f"{level} decoder needs a {expected} latent, got {z.kind}")
    in_res, lat_res = level_resolutions(level, cfg)
    if z.resolution != lat_res:
        raise ResolutionMismatch(f"{level} latent must have resolution {lat_res}")
    if target is not None and target.resolution != in_res:
        raise ShapeMismatch("target resolution does not match the decoder output")
    p = f"vae_{level}"
    support = z.support
    h = ad.silu(sparse_conv(z.mu, support, params, f"{p}.dec.c0"))
    h = ad.silu(sparse_conv(h, support, params, f"{p}.dec.c1"))
    logit0 = linear(h, params, f"{p}.dec.keep0").reshape(-1)
    kept0 = _keep(logit0.data, force, support, None if target is None else downsample(target, 2))
    rows = np.flatnonzero(kept0)
    children = support.children(rows)
    hc = upsample(ad.gather_rows(h, rows), params, f"{p}.dec.up")
    hc = ad.silu(sparse_conv(ad.silu(hc), children, params, f"{p}.dec.c2"))
    logit1 = linear(hc, params, f"{p}.dec.keep1").reshape(-1)
    normals = linear(hc, params, f"{p}.dec.normal")
    kept1 = _keep(logit1.data, force, children, None)
    stages = [DecodeStage(support, logit0, kept0), DecodeStage(children, logit1, kept1)]
    n = normals.data[kept1]
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(ln > 1e-12, n / np.where(ln > 1e-12, ln, 1.0), np.array([0.0, 0.0, 1.0]))
    grid = SparseVoxelGrid(in_res, children.ijk[kept1], n)
    return DecodeOutput(stages, normals, grid)


def _keep(logits: np.ndarray, force: str | None, cands: VoxelSet, teacher: SparseVoxelGrid | None) -> np.ndarray:
    if force == "keep":
        return np.ones(len(logits), bool)
    if force == "prune":
        return np.zeros(len(logits), bool)
    if teacher is not None:
        return cands.labels_from(teacher) > 0
    return logits >= 0.0


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over latent elements of KL(N(mu, sigma^2) || N(0, 1))."""
    return ad.mean((mu * mu + ad.exp(logvar) - 1.0 - logvar) * 0.5)


def vae_loss(pred: DecodeOutput, target: SparseVoxelGrid, posterior: LatentGrid, lambda_bce: float = 20.0, lambda_l1: float = 50.0, lambda_kl: float = 0.03) -> LossBreakdown:
    """lambda_bce * BCE(occupancy, all stages) + lambda_l1 * L1(normals on true
    positives) + lambda_kl * KL(posterior || N(0, I))."""
    final = pred.stages[-1].candidates
    if final.resolution != target.resolution:
        raise ShapeMismatch("prediction and target resolutions differ")
    labels = [
        pred.stages[0].candidates.labels_from(downsample(target, 2)),
        final.labels_from(target),
    ]
    logits = ad.concat([ad.clip(s.logits, -LOGIT_CAP, LOGIT_CAP) for s in pred.stages], axis=0)
    bce = ad.bce_with_logits(logits, np.concatenate(labels))
    tp = np.flatnonzero((labels[1] > 0) & (pred.stages[-1].logits.data >= 0))
    if len(tp):
        tn = target.features[target.lookup(final.ijk[tp])]
        l1 = ad.mean(ad.tabs(ad.gather_rows(pred.normals, tp) - tn))
    else:
        l1 = Tensor(0.0)
    kl = kl_standard_normal(posterior.mu, posterior.logvar) if posterior.is_posterior else Tensor(0.0)
    total = bce * lambda_bce + l1 * lambda_l1 + kl * lambda_kl
    return LossBreakdown(
        total,
        {"bce": float(bce.data), "l1_normals": float(l1.data), "kl": float(kl.data)},
        {"bce": lambda_bce, "l1_normals": lambda_l1, "kl": lambda_kl},
    )
