"""Small random instances shared by the unit and acceptance tests."""
import numpy as np

from buildabs.geometry import PointCloud
from buildabs.locadit import autodiff as ad
from buildabs.locadit.ar import ar_loss, init_ar, init_prompt_encoder
from buildabs.locadit.autodiff import Tensor
from buildabs.locadit.diffusion import DiffusionSchedule, diffusion_loss, init_denoiser, stage_condition
from buildabs.locadit.nn import ParamStore, collect_grads
from buildabs.locadit.vae import LatentGrid, init_vae, latent_support, sample_posterior, vae_decode, vae_encode, vae_loss
from buildabs.tokenizer import TokenSequence, Vocabulary
from buildabs.voxel import SparseVoxelGrid, keys_to_ijk

from conftest import tiny_config
from oracles import param_gradcheck

CFG = tiny_config()


def random_grid(rng, res, n):
    keys = np.sort(rng.choice(res**3, size=n, replace=False))
    nrm = rng.normal(size=(n, 3))
    return SparseVoxelGrid(res, keys_to_ijk(keys, res), nrm / np.linalg.norm(nrm, axis=1, keepdims=True))


def random_cloud(rng, n=40):
    nrm = rng.normal(size=(n, 3))
    return PointCloud(rng.uniform(-0.95, 0.95, (n, 3)), nrm / np.linalg.norm(nrm, axis=1, keepdims=True))


def gradcheck(params: ParamStore, prefix: str, loss_fn, seed: int) -> float:
    t = params.tensors(prefix)
    loss_fn(t).backward()
    grads = collect_grads(t)

    def f():
        with ad.no_grad():
            return float(loss_fn(params.tensors(prefix, trainable=False)).data)

    return param_gradcheck(params.arrays, grads, f, np.random.default_rng(seed))


def vae_case(seed, level):
    rng = np.random.default_rng(seed)
    params = ParamStore(seed)
    init_vae(params, level, CFG)
    for v in params.arrays.values():
        v += rng.normal(size=v.shape) * 0.1
    res = CFG.coarse_res if level == "coarse" else CFG.fine_res
    grid = random_grid(rng, res, int(rng.integers(4, 20)))

    def loss(p):
        post = vae_encode(grid, level, p, CFG)
        z = sample_posterior(post, seed)
        out = vae_decode(z, level, p, CFG, target=grid)
        return vae_loss(out, grid, post, CFG.lambda_bce, CFG.lambda_l1, CFG.lambda_kl).total

    return params, loss


def diffusion_case(seed, level):
    rng = np.random.default_rng(seed)
    params = ParamStore(seed)
    init_denoiser(params, level, CFG)
    for k, v in params.arrays.items():
        if not k.endswith("latent_scale"):
            v += rng.normal(size=v.shape) * 0.1
    sched = DiffusionSchedule.linear(CFG.diffusion_steps, CFG.beta_start, CFG.beta_end)
    p_in = random_cloud(rng)
    inputs = {"p_in": p_in}
    if level == "coarse":
        support, kind = latent_support("coarse", None, CFG), "dense"
    else:
        coarse = random_grid(rng, CFG.coarse_res, 3)
        inputs["coarse"] = coarse
        support, kind = latent_support("fine", coarse, CFG), "sparse"
    z0 = LatentGrid(kind, support, Tensor(rng.normal(size=(len(support), CFG.latent_dim))))
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.normal(size=z0.mu.shape)

    def loss(p):
        cond = stage_condition(inputs, support, level, p, CFG)
        return diffusion_loss(p, z0, t, eps, cond, sched, level, CFG).total

    return params, loss


def ar_case(seed):
    rng = np.random.default_rng(seed)
    params = ParamStore(seed)
    init_prompt_encoder(params, CFG)
    init_ar(params, CFG)
    vocab = Vocabulary(CFG.coord_bins)
    n = int(rng.integers(1, 30))
    seq = TokenSequence([vocab.bos, *rng.integers(0, vocab.size, n).tolist(), vocab.eos])
    cloud = random_cloud(rng)

    def loss(p):
        return ar_loss(p, cloud, seq, CFG).total

    return params, loss
