"""Conditional latent diffusion on voxel supports.

The denoiser sees [z_t, condition] channel-concatenated at its input and
the timestep through FiLM modulation of a residual stack of sparse 3x3x3
convolutions. The condition is a learned per-voxel lift of the input
cloud's occupancy at the latent resolution; the fine stage also receives
the coarse stage's normals and occupancy through each voxel's parent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import EmptyCloud, ShapeMismatch, StepOutOfRange
from ..geometry import PointCloud
from ..rng import make_rng
from ..voxel import DenseGrid, SparseVoxelGrid, linear_keys, point_to_index
from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .nn import ParamStore, linear, sinusoidal, sparse_conv
from .sparse import VoxelSet
from .vae import LatentGrid, LossBreakdown


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if not (np.all(b > 0) and np.all(b < 1)):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, steps: int = 100, start: float = 1e-3, end: float = 0.2) -> "DiffusionSchedule":
        return cls(np.linspace(start, end, steps))

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of (1 - beta) up to step t; 1 at t = 0."""
        self._check(t, allow_zero=True)
        return float(np.prod(1.0 - self.betas[:t]))

    def _check(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise StepOutOfRange(f"step {t} outside [{lo}, {self.T}]")


def diffuse_forward(z0, t: int, eps, sched: DiffusionSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. Step 0 returns z0."""
    ab = sched.alpha_bar(t)
    if isinstance(z0, LatentGrid):
        return z0.with_values(diffuse_forward(z0.mu.data, t, eps, sched))
    z0 = z0 if isinstance(z0, Tensor) else np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeMismatch("noise and latent shapes differ")
    return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


# --------------------------------------------------------------------------
# condition


def _extra_channels(level: str) -> int:
    # voxel-centre coordinates, plus parent normal and occupancy for the fine level
    return 3 + (4 if level == "fine" else 0)


def init_denoiser(params: ParamStore, level: str, cfg: ModelConfig, latent_scale: float = 1.0) -> None:
    """``latent_scale`` maps VAE latents to roughly unit variance; it is
    stored with the weights but receives no gradient."""
    p = f"diff_{level}"
    w, lat = cfg.denoiser_width, cfg.latent_dim
    params.add(f"{p}.latent_scale", np.array([latent_scale], dtype=np.float64))
    params.linear(f"{p}.cond.l1", COND_INPUTS, 16, bias=False)
    params.linear(f"{p}.cond.l2", 16, cfg.cond_channels, bias=False)
    params.linear(f"{p}.in", 27 * (lat + cfg.cond_channels + _extra_channels(level)), w)
    params.linear(f"{p}.t0", cfg.time_dim, 2 * w)
    for i in range(cfg.denoiser_layers):
        params.linear(f"{p}.film{i}", 2 * w, 2 * w, scale=0.1)
        params.linear(f"{p}.res{i}", 27 * w, w, scale=0.5)
    params.linear(f"{p}.out", w, lat, scale=0.1)


COND_INPUTS = 10


def _occupancy_inputs(p_in: PointCloud, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Occupied voxel keys and per-voxel inputs: [1, log(1 + count), share
    of the voxel's points in each of its 8 octants]."""
    if len(p_in) == 0:
        raise EmptyCloud("condition needs a non-empty input cloud")
    fine = point_to_index(p_in.positions, 2 * resolution)
    keys = linear_keys(fine // 2, resolution)
    octant = (fine % 2) @ np.array([4, 2, 1])
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    share = np.zeros((len(uniq), 8))
    np.add.at(share, (inv, octant), 1.0)
    share /= counts[:, None]
    return uniq, np.hstack([np.ones((len(uniq), 1)), np.log1p(counts)[:, None], share])


def latent_scale(params, level: str) -> float:
    v = params[f"diff_{level}.latent_scale"]
    return float(np.asarray(getattr(v, "data", v)).reshape(-1)[0])


def condition_features(p_in: PointCloud, support: VoxelSet, params: dict, level: str) -> Tensor:
    """Per-voxel condition on ``support`` (zero where the input is empty)."""
    p = f"diff_{level}"
    keys, x = _occupancy_inputs(p_in, support.resolution)
    h = linear(ad.silu(linear(Tensor(x), params, f"{p}.cond.l1")), params, f"{p}.cond.l2")
    rows = np.searchsorted(keys, support.keys)
    rows = np.clip(rows, 0, len(keys) - 1)
    rows = np.where(keys[rows] == support.keys, rows, -1)
    return ad.gather_rows(h, rows)


def encode_condition(p_in: PointCloud, params: dict, resolution: int, level: str = "coarse") -> DenseGrid:
    """Dense condition volume at ``resolution`` (occupancy + learned features)."""
    with ad.no_grad():
        dense = VoxelSet.dense(resolution)
        feats = condition_features(p_in, dense, params, level).data
    occ = np.zeros(resolution**3)
    keys, _ = _occupancy_inputs(p_in, resolution)
    occ[keys] = 1.0
    r = resolution
    return DenseGrid(r, occ.reshape(r, r, r), feats.reshape(r, r, r, -1))


def voxel_centers(support: VoxelSet) -> np.ndarray:
    return (support.ijk + 0.5) * (2.0 / support.resolution) - 1.0


def coarse_guidance(coarse: SparseVoxelGrid, support: VoxelSet) -> np.ndarray:
    """Parent coarse normal and occupancy flag for every fine-latent voxel."""
    out = np.zeros((len(support), 4))
    rows = coarse.lookup(support.ijk // 2)
    hit = rows >= 0
    if coarse.channels == 3:
        out[hit, :3] = coarse.features[rows[hit]]
    out[hit, 3] = 1.0
    return out


def stage_condition(inputs: dict, support: VoxelSet, level: str, params: dict, cfg: ModelConfig) -> Tensor:
    """Everything the denoiser is conditioned on, as one (N, C) tensor.

    ``inputs`` carries ``p_in`` and, for the fine level, ``coarse`` (the
    coarse grid whose children form the support).
    """
    parts = [condition_features(inputs["p_in"], support, params, level), Tensor(voxel_centers(support))]
    if level == "fine":
        parts.append(Tensor(coarse_guidance(inputs["coarse"], support)))
    return ad.concat(parts, axis=1)


# --------------------------------------------------------------------------
# denoiser


def denoise(params: dict, z_t, t: int, cond, support: VoxelSet, level: str, cfg: ModelConfig) -> Tensor:
    p = f"diff_{level}"
    x = ad.concat([ad.as_tensor(z_t), ad.as_tensor(cond)], axis=1)
    h = sparse_conv(x, support, params, f"{p}.in")
    temb = ad.silu(linear(Tensor(sinusoidal([t], cfg.time_dim)), params, f"{p}.t0"))
    w = cfg.denoiser_width
    for i in range(cfg.denoiser_layers):
        film = linear(temb, params, f"{p}.film{i}")
        scale, shift = film[:, :w], film[:, w:]
        u = ad.silu(h * (scale + 1.0) + shift)
        h = h + sparse_conv(u, support, params, f"{p}.res{i}")
    return linear(ad.silu(h), params, f"{p}.out")


Model = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


def _predict(model, z_t, t, cond, support, level, cfg):
    if callable(model):
        return ad.as_tensor(model(z_t.data if isinstance(z_t, Tensor) else z_t, t, cond))
    return denoise(model, z_t, t, cond, support, level, cfg)


def diffusion_loss(model, z0: LatentGrid, t: int, eps, cond, sched: DiffusionSchedule, level: str = "coarse", cfg: ModelConfig | None = None) -> LossBreakdown:
    """Mean squared error between the injected noise and its prediction.

    ``model`` is a parameter dict for ``denoise`` or any callable
    (z_t, t, cond) -> predicted noise.
    """
    sched._check(t)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.mu.shape:
        raise ShapeMismatch("noise shape must match the latent")
    if cond is not None and len(cond) != len(z0.support):
        raise ShapeMismatch("condition rows must match the latent support")
    z_t = diffuse_forward(z0.mu.data, t, eps, sched)
    pred = _predict(model, z_t, t, cond, z0.support, level, cfg)
    mse = ad.mean((pred - eps) ** 2)
    return LossBreakdown(mse, {"mse": float(mse.data)}, {"mse": 1.0})


def diffusion_sample(
    model,
    cond,
    support: VoxelSet,
    sched: DiffusionSchedule,
    seed: int,
    level: str = "coarse",
    cfg: ModelConfig | None = None,
    channels: int | None = None,
) -> LatentGrid:
    """Ancestral sampling from unit Gaussian noise on ``support``.

    Uses the posterior variance beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t).
    """
    rng = make_rng(seed, "diffusion_sample", level)
    lat = channels if channels is not None else cfg.latent_dim
    z = rng.standard_normal((len(support), lat))
    cond_arr = cond.data if isinstance(cond, Tensor) else cond
    with ad.no_grad():
        for t in range(sched.T, 0, -1):
            beta = sched.beta(t)
            ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t - 1)
            eps_hat = _predict(model, z, t, cond_arr, support, level, cfg).data
            z = (z - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
            if t > 1:
                var = beta * (1.0 - ab_prev) / (1.0 - ab)
                z = z + np.sqrt(var) * rng.standard_normal(z.shape)
    kind = "dense" if level == "coarse" else "sparse"
    return LatentGrid(kind, support, Tensor(z))
