"""Stage-wise training loops. Each returns the trained ParamStore and the
per-iteration loss log; training is single-threaded and deterministic."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..rng import derive_seed, make_rng
from ..voxel import SparseVoxelGrid, iou, voxel_centers_to_points
from . import autodiff as ad
from .ar import ar_loss, init_ar, init_prompt_encoder
from .config import ModelConfig
from .diffusion import DiffusionSchedule, diffusion_loss, init_denoiser, latent_scale, stage_condition
from .nn import ParamStore, collect_grads, make_optimizer
from .vae import LatentGrid, LossBreakdown, init_vae, sample_posterior, vae_decode, vae_encode, vae_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iters: int = 200
    lr: float = 2e-3
    optimizer: str = "adam"
    seed: int = 0
    log_every: int = 1
    batch: int = 0  # samples per iteration; 0 = all of them
    cosine: bool = True  # anneal the learning rate to zero over ``iters``
    draws: int = 4  # diffusion only: (t, noise) pairs per sample per iteration


@dataclass
class TrainResult:
    params: ParamStore
    log: list = field(default_factory=list)

    def write_log(self, path, stage: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps({"stage": stage, **rec}, sort_keys=True) + "\n")


def _batches(n: int, tc: TrainConfig, it: int) -> np.ndarray:
    """Cyclic mini-batches over a per-epoch shuffle."""
    if not tc.batch or tc.batch >= n:
        return np.arange(n)
    pos = it * tc.batch + np.arange(tc.batch)
    epoch, slot = pos // n, pos % n
    return np.array([make_rng(tc.seed, "epoch", int(e)).permutation(n)[s] for e, s in zip(epoch, slot)])


def _run(params: ParamStore, prefix: str, tc: TrainConfig, step_fn, n_items: int) -> TrainResult:
    opt = make_optimizer(tc.optimizer, params, tc.lr)
    result = TrainResult(params)
    for it in range(tc.iters):
        tensors = params.tensors(prefix)
        comps: dict[str, float] = {}
        total = None
        items = _batches(n_items, tc, it)
        for i in items:
            loss = step_fn(tensors, int(i), it)
            total = loss.total if total is None else total + loss.total
            for k, v in loss.components.items():
                comps[k] = comps.get(k, 0.0) + float(v) / len(items)
        total = total * (1.0 / len(items))
        total.backward()
        if tc.cosine:
            opt.lr = 0.5 * tc.lr * (1.0 + np.cos(np.pi * it / tc.iters))
        opt.step(collect_grads(tensors))
        if it % tc.log_every == 0 or it == tc.iters - 1:
            rec = {"iter": it + 1, "loss": float(total.data), **comps}
            result.log.append(rec)
            log.debug("%s %s", prefix, rec)
    return result


def train_vae(grids: list[SparseVoxelGrid], level: str, cfg: ModelConfig, tc: TrainConfig, params: ParamStore | None = None) -> TrainResult:
    if params is None:
        params = ParamStore(tc.seed, {"stage": f"vae-{level}", **cfg.to_dict()})
        init_vae(params, level, cfg)

    def step(p, i, it):
        post = vae_encode(grids[i], level, p, cfg)
        z = sample_posterior(post, derive_seed(tc.seed, "vae", it, i))
        out = vae_decode(z, level, p, cfg, target=grids[i])
        return vae_loss(out, grids[i], post, cfg.lambda_bce, cfg.lambda_l1, cfg.lambda_kl)

    return _run(params, f"vae_{level}", tc, step, len(grids))


def reconstruct(grid: SparseVoxelGrid, level: str, params: ParamStore, cfg: ModelConfig) -> SparseVoxelGrid:
    """Encode, take the posterior mean, decode with pruning."""
    with ad.no_grad():
        p = params.tensors(f"vae_{level}", trainable=False)
        post = vae_encode(grid, level, p, cfg)
        return vae_decode(post.with_values(post.mu.data), level, p, cfg).grid


def reconstruction_iou(grids, level, params, cfg) -> list[float]:
    return [iou(reconstruct(g, level, params, cfg), g) for g in grids]


def encode_latents(grids, level, params, cfg) -> list[LatentGrid]:
    """Posterior means, the diffusion targets z0."""
    out = []
    with ad.no_grad():
        p = params.tensors(f"vae_{level}", trainable=False)
        for g in grids:
            post = vae_encode(g, level, p, cfg)
            out.append(post.with_values(post.mu.data.copy()))
    return out


def train_diffusion(
    latents: list[LatentGrid],
    conds: list,
    level: str,
    cfg: ModelConfig,
    tc: TrainConfig,
    params: ParamStore | None = None,
) -> TrainResult:
    """Denoiser training with ``tc.draws`` (t, eps) pairs per latent per iteration.

    ``conds`` holds, per latent, the condition inputs produced by
    ``stage_condition`` (P_in cloud plus, for the fine level, the coarse grid).
    """
    if params is None:
        params = ParamStore(tc.seed, {"stage": f"diffusion-{level}", **cfg.to_dict()})
        std = np.concatenate([z.mu.data.ravel() for z in latents]).std()
        init_denoiser(params, level, cfg, 1.0 / max(float(std), 1e-6))
    sched = DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    scale = latent_scale(params, level)
    latents = [z.with_values(z.mu.data * scale) for z in latents]

    def step(p, i, it):
        rng = make_rng(tc.seed, "diffusion", it, i)
        z0 = latents[i]
        cond = stage_condition(conds[i], z0.support, level, p, cfg)
        losses = []
        for _ in range(tc.draws):
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(z0.mu.shape)
            losses.append(diffusion_loss(p, z0, t, eps, cond, sched, level, cfg))
        total = losses[0].total
        for l in losses[1:]:
            total = total + l.total
        return LossBreakdown(total * (1.0 / tc.draws), {"mse": float(np.mean([l.components["mse"] for l in losses]))})

    return _run(params, f"diff_{level}", tc, step, len(latents))


def train_ar(prompt_clouds, sequences, cfg: ModelConfig, tc: TrainConfig, params: ParamStore | None = None) -> TrainResult:
    """Joint training of the prompt encoder and the autoregressive model."""
    if params is None:
        params = ParamStore(tc.seed, {"stage": "ar", **cfg.to_dict()})
        init_prompt_encoder(params, cfg)
        init_ar(params, cfg)

    def step(p, i, it):
        return ar_loss(p, prompt_clouds[i], sequences[i], cfg, prompt_seed=derive_seed(tc.seed, "prompt", it, i))

    return _run(params, "", tc, step, len(sequences))


STAGE_ORDER = ("vae-coarse", "vae-fine", "diffusion-coarse", "diffusion-fine", "ar")


def prompt_cloud(fine: SparseVoxelGrid):
    """Training prompt: fine-grid voxel centres with their normals, the same
    kind of cloud the priors hand to the token model at inference."""
    return voxel_centers_to_points(fine)


def train_all(samples, p_ins, cfg: ModelConfig, budgets: dict[str, TrainConfig]) -> tuple[ParamStore, dict]:
    """Train every stage in order on ``samples`` (see ``preprocess.Sample``)
    with degraded inputs ``p_ins``. Returns the merged parameters and logs."""
    coarse = [s.coarse for s in samples]
    fine = [s.fine for s in samples]
    logs: dict = {"seconds": {}}
    merged = ParamStore(budgets["vae-coarse"].seed, {"stage": "all", **cfg.to_dict()})
    clock = [time.perf_counter()]

    def keep(stage, res):
        now = time.perf_counter()
        logs["seconds"][stage] = now - clock[0]
        clock[0] = now
        logs[stage] = res.log
        merged.merge(res.params)
        return res.params

    vc = keep("vae-coarse", train_vae(coarse, "coarse", cfg, budgets["vae-coarse"]))
    vf = keep("vae-fine", train_vae(fine, "fine", cfg, budgets["vae-fine"]))
    zc = encode_latents(coarse, "coarse", vc, cfg)
    zf = encode_latents(fine, "fine", vf, cfg)
    keep("diffusion-coarse", train_diffusion(zc, [{"p_in": p} for p in p_ins], "coarse", cfg, budgets["diffusion-coarse"]))
    conds = [{"p_in": p, "coarse": c} for p, c in zip(p_ins, coarse)]
    keep("diffusion-fine", train_diffusion(zf, conds, "fine", cfg, budgets["diffusion-fine"]))
    keep("ar", train_ar([prompt_cloud(g) for g in fine], [s.tokens for s in samples], cfg, budgets["ar"]))
    return merged, logs
