import numpy as np
from hypothesis import given, strategies as st

from buildabs.geometry import normalize_mesh
from buildabs.locadit.sparse import VoxelSet
from buildabs.locadit.train import TrainConfig, _batches, encode_latents, train_ar, train_diffusion, train_vae
from buildabs.preprocess import prepare_sample
from buildabs.tokenizer import Vocabulary
from buildabs.toy import toy_buildings
from buildabs.voxel import voxel_centers_to_points

from conftest import tiny_config

CFG = tiny_config(ar_max_len=400)


def samples(n=2):
    out = []
    for i, (_, m) in enumerate(toy_buildings(n, seed=0)):
        mesh, _ = normalize_mesh(m)
        out.append(prepare_sample(str(i), mesh, CFG.coarse_res, CFG.fine_res, 2000, seed=i, vocab=Vocabulary(CFG.coord_bins)))
    return out


@given(st.integers(1, 9), st.integers(1, 4), st.integers(0, 100))
def test_every_item_once_per_epoch(n, batch, seed):
    tc = TrainConfig(batch=batch, seed=seed)
    steps = n * batch  # n epochs worth of slots, aligned to the batch size
    seen = np.concatenate([_batches(n, tc, it) for it in range(steps // batch)])
    if batch < n:
        counts = np.bincount(seen, minlength=n)
        assert counts.min() == counts.max()
    else:
        assert set(seen) == set(range(n))


def test_vae_training_is_deterministic_and_descends():
    grids = [s.coarse for s in samples()]
    tc = TrainConfig(iters=30, lr=1e-2, seed=3)
    a, b = train_vae(grids, "coarse", CFG, tc), train_vae(grids, "coarse", CFG, tc)
    assert a.log == b.log
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    assert a.log[-1]["loss"] < a.log[0]["loss"]
    assert {"bce", "l1_normals", "kl"} <= set(a.log[0])


def test_diffusion_training_runs_on_both_levels():
    ss = samples()
    for level, grids in (("coarse", [s.coarse for s in ss]), ("fine", [s.fine for s in ss])):
        vae = train_vae(grids, level, CFG, TrainConfig(iters=2)).params
        z = encode_latents(grids, level, vae, CFG)
        if level == "fine":
            assert all(len(zi.support) == 8 * len(VoxelSet.from_grid(s.coarse)) for zi, s in zip(z, ss))
        conds = [{"p_in": s.gt, "coarse": s.coarse} for s in ss]
        res = train_diffusion(z, conds, level, CFG, TrainConfig(iters=5, draws=2))
        assert len(res.log) == 5 and np.isfinite(res.log[-1]["mse"])


def test_ar_training_descends():
    ss = samples()
    res = train_ar([voxel_centers_to_points(s.fine) for s in ss], [s.tokens for s in ss], CFG, TrainConfig(iters=40, lr=3e-3))
    assert res.log[-1]["loss"] < res.log[0]["loss"]
