import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from buildabs.errors import KindMismatch, MissingNormals, ResolutionMismatch, StageFailure, StepOutOfRange
from buildabs.geometry import PointCloud
from buildabs.locadit import autodiff as ad
from buildabs.locadit.ar import ar_forward, ar_generate, ar_loss_from_logits, encode_prompt, init_ar, init_prompt_encoder, prefix_mask
from buildabs.locadit.autodiff import Tensor
from buildabs.locadit.diffusion import (
    DiffusionSchedule,
    diffuse_forward,
    diffusion_loss,
    diffusion_sample,
    encode_condition,
    init_denoiser,
)
from buildabs.locadit.nn import ParamStore, collect_grads, load_params, save_params
from buildabs.locadit.pipeline import GenerateConfig, generate_pipeline
from buildabs.locadit.sparse import VoxelSet
from buildabs.locadit.vae import (
    LatentGrid,
    init_vae,
    kl_standard_normal,
    latent_support,
    sample_posterior,
    vae_decode,
    vae_encode,
    vae_loss,
)
from buildabs.rng import make_rng
from buildabs.tokenizer import Vocabulary, detokenize_mesh, validate_generated
from buildabs.voxel import downsample

from cases import CFG, ar_case, diffusion_case, gradcheck, random_cloud, random_grid, vae_case
from oracles import bce_reference, kl_closed_form


# --------------------------------------------------------------------------
# gradient checks against finite differences


@pytest.mark.parametrize("level", ["coarse", "fine"])
def test_vae_loss_gradients(level):
    errs = []
    for s in range(20):
        params, loss = vae_case(s, level)
        errs.append(gradcheck(params, f"vae_{level}", loss, s))
    assert max(errs) <= 1e-4


@pytest.mark.parametrize("level", ["coarse", "fine"])
def test_diffusion_loss_gradients(level):
    errs = []
    for s in range(20):
        params, loss = diffusion_case(s, level)
        errs.append(gradcheck(params, f"diff_{level}", loss, s))
    assert max(errs) <= 1e-4


def test_ar_loss_gradients():
    errs = []
    for s in range(20):
        params, loss = ar_case(s)
        errs.append(gradcheck(params, "", loss, s))
    assert max(errs) <= 1e-4


def test_descent_direction_lowers_loss():
    lowered = 0
    for s in range(100):
        params, loss = diffusion_case(s, "coarse")
        t = params.tensors("diff_coarse")
        before = loss(t)
        before.backward()
        grads = collect_grads(t)
        norm = np.sqrt(sum((g * g).sum() for g in grads.values()))
        for k, g in grads.items():
            params.arrays[k] -= 1e-3 * g / max(norm, 1e-12)
        with ad.no_grad():
            after = loss(params.tensors("diff_coarse", trainable=False))
        lowered += float(after.data) < float(before.data)
    assert lowered >= 99


# --------------------------------------------------------------------------
# VAE


def test_kl_closed_form():
    assert kl_standard_normal(Tensor([1.0]), Tensor([0.0])).item() == 0.5
    assert kl_standard_normal(Tensor([0.0]), Tensor([0.0])).item() == 0.0


@given(hnp.arrays(np.float64, (4, 2), elements=st.floats(-5, 5)), hnp.arrays(np.float64, (4, 2), elements=st.floats(-5, 5)))
def test_kl_nonnegative(mu, lv):
    v = kl_standard_normal(Tensor(mu), Tensor(lv)).item()
    assert v >= 0
    assert v == pytest.approx(kl_closed_form(mu, lv), rel=1e-12, abs=1e-15)


def test_vae_loss_matches_reimplementation():
    for seed in range(10):
        params, _ = vae_case(seed, "coarse")
        rng = np.random.default_rng(seed)
        grid = random_grid(rng, CFG.coarse_res, 10)
        p = params.tensors("vae_coarse", trainable=False)
        post = vae_encode(grid, "coarse", p, CFG)
        out = vae_decode(sample_posterior(post, 0), "coarse", p, CFG, target=grid)
        got = vae_loss(out, grid, post, 20.0, 50.0, 0.03)

        coarse_lab = [1.0 if tuple(ijk) in {tuple(x) for x in downsample(grid, 2).indices} else 0.0 for ijk in out.stages[0].candidates.ijk]
        occupied = {tuple(x): i for i, x in enumerate(grid.indices)}
        fine_ijk = out.stages[1].candidates.ijk
        fine_lab = [1.0 if tuple(x) in occupied else 0.0 for x in fine_ijk]
        logits = np.clip(np.concatenate([out.stages[0].logits.data, out.stages[1].logits.data]), -30, 30)
        bce = bce_reference(logits, np.array(coarse_lab + fine_lab))
        l1 = []
        for i, x in enumerate(fine_ijk):
            if tuple(x) in occupied and out.stages[1].logits.data[i] >= 0:
                l1.extend(np.abs(out.normals.data[i] - grid.features[occupied[tuple(x)]]))
        l1 = float(np.mean(l1)) if l1 else 0.0
        kl = kl_closed_form(post.mu.data, post.logvar.data)
        assert got.value == pytest.approx(20 * bce + 50 * l1 + 0.03 * kl, abs=1e-9)
        assert got.components["bce"] == pytest.approx(bce, abs=1e-9)


def test_decode_force_modes():
    params, _ = vae_case(0, "coarse")
    p = params.tensors("vae_coarse", trainable=False)
    z = LatentGrid("dense", latent_support("coarse", None, CFG), Tensor(np.zeros((8, CFG.latent_dim))))
    keep = vae_decode(z, "coarse", p, CFG, force="keep")
    assert len(keep.grid) == CFG.coarse_res**3
    np.testing.assert_allclose(np.linalg.norm(keep.grid.features, axis=1), 1.0)
    assert len(vae_decode(z, "coarse", p, CFG, force="prune").grid) == 0


def test_decode_checks_kind_and_resolution():
    params, _ = vae_case(0, "fine")
    p = params.tensors("vae_fine", trainable=False)
    dense = LatentGrid("dense", VoxelSet.dense(8), Tensor(np.zeros((512, CFG.latent_dim))))
    with pytest.raises(KindMismatch):
        vae_decode(dense, "fine", p, CFG)
    with pytest.raises(ResolutionMismatch):
        vae_encode(random_grid(np.random.default_rng(0), 8, 4), "fine", p, CFG)


def test_fine_support_follows_coarse_occupancy():
    coarse = random_grid(np.random.default_rng(2), CFG.coarse_res, 5)
    sup = latent_support("fine", coarse, CFG)
    assert len(sup) == 40 and sup.resolution == CFG.fine_res // 2
    assert np.all(coarse.lookup(sup.ijk // 2) >= 0)


# --------------------------------------------------------------------------
# diffusion


SCHED = DiffusionSchedule.linear(100)


def test_schedule_endpoints():
    assert SCHED.alpha_bar(0) == 1.0
    assert SCHED.alpha_bar(SCHED.T) < 0.05
    with pytest.raises(StepOutOfRange):
        SCHED.alpha_bar(101)
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.0, 0.1]))


def test_forward_step_zero_is_identity(rng):
    z = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(diffuse_forward(z, 0, rng.normal(size=z.shape), SCHED), z)


@pytest.mark.parametrize("t", [1, 50, 100])
def test_forward_moments(t):
    z0 = np.array([1.5, -0.7, 0.2])
    eps = np.random.default_rng(t).standard_normal((100_000, 3))
    zt = diffuse_forward(np.broadcast_to(z0, eps.shape), t, eps, SCHED)
    ab = SCHED.alpha_bar(t)
    sd = np.sqrt(1 - ab)
    assert np.all(np.abs(zt.mean(0) - np.sqrt(ab) * z0) <= 0.01 * np.maximum(np.abs(np.sqrt(ab) * z0), sd))
    np.testing.assert_allclose(zt.var(0), 1 - ab, rtol=0.02)


def _latent(rng, n=64, c=4):
    return LatentGrid("dense", VoxelSet.dense(4), Tensor(rng.normal(size=(n, c))))


def test_oracle_model_has_zero_loss(rng):
    z0 = _latent(rng)
    for t in (1, 37, 100):
        eps = rng.normal(size=z0.mu.shape)
        ab = SCHED.alpha_bar(t)
        oracle = lambda zt, tt, c: (zt - np.sqrt(ab) * z0.mu.data) / np.sqrt(1 - ab)  # noqa: E731
        assert diffusion_loss(oracle, z0, t, eps, None, SCHED).value <= 1e-20


def test_zero_model_loss_is_noise_variance():
    rng = np.random.default_rng(0)
    z0 = LatentGrid("dense", VoxelSet.dense(16), Tensor(rng.normal(size=(4096, 8))))
    v = diffusion_loss(lambda z, t, c: np.zeros_like(z), z0, 50, rng.normal(size=(4096, 8)), None, SCHED).value
    assert v == pytest.approx(1.0, rel=0.02)


def test_loss_rejects_bad_step(rng):
    z0 = _latent(rng)
    with pytest.raises(StepOutOfRange):
        diffusion_loss(lambda z, t, c: z, z0, 0, np.zeros(z0.mu.shape), None, SCHED)


def test_zero_noise_sampler_follows_recursion():
    sched = DiffusionSchedule.linear(20)
    support = VoxelSet.dense(2)
    out = diffusion_sample(lambda z, t, c: np.zeros_like(z), None, support, sched, 7, channels=3).mu.data
    rng = make_rng(7, "diffusion_sample", "coarse")
    z = rng.standard_normal((8, 3))
    ab = np.cumprod(1 - sched.betas)
    for t in range(20, 0, -1):
        b = sched.betas[t - 1]
        z = z / np.sqrt(1 - b)
        if t > 1:
            z = z + np.sqrt(b * (1 - ab[t - 2]) / (1 - ab[t - 1])) * rng.standard_normal(z.shape)
    np.testing.assert_allclose(out, z, rtol=1e-9, atol=1e-12)


def test_sampling_deterministic_per_seed():
    support = VoxelSet.dense(2)
    f = lambda z, t, c: 0.1 * z  # noqa: E731
    a = diffusion_sample(f, None, support, SCHED, 3, channels=2).mu.data
    b = diffusion_sample(f, None, support, SCHED, 3, channels=2).mu.data
    c = diffusion_sample(f, None, support, SCHED, 4, channels=2).mu.data
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def _denoiser_params():
    params = ParamStore(0)
    init_denoiser(params, "coarse", CFG)
    return params.tensors("diff_coarse", trainable=False)


def test_condition_permutation_invariant(rng):
    p = _denoiser_params()
    cloud = random_cloud(rng, 200)
    perm = rng.permutation(len(cloud))
    a = encode_condition(cloud, p, 8)
    b = encode_condition(cloud.subset(perm), p, 8)
    np.testing.assert_allclose(a.features, b.features, atol=1e-12)
    np.testing.assert_array_equal(a.occupancy, b.occupancy)


def test_condition_zero_in_empty_space():
    p = _denoiser_params()
    cloud = PointCloud(np.array([[0.5, 0.5, 0.5], [0.6, 0.55, 0.5]]))
    g = encode_condition(cloud, p, 4)
    assert g.occupancy.sum() == 1
    empty = g.occupancy == 0
    assert np.all(g.features[empty] == 0) and np.any(g.features[~empty] != 0)


# --------------------------------------------------------------------------
# prompt encoder and token model


@pytest.fixture(scope="module")
def ar_params():
    params = ParamStore(0)
    init_prompt_encoder(params, CFG)
    init_ar(params, CFG)
    return params.tensors("", trainable=False)


@pytest.mark.parametrize("n", [10, 10_000])
def test_prompt_has_fixed_length(ar_params, n):
    cloud = random_cloud(np.random.default_rng(n), n)
    assert encode_prompt(cloud, ar_params, CFG).shape == (CFG.prompt_len, CFG.ar_width)


def test_prompt_permutation_invariant(ar_params, rng):
    cloud = random_cloud(rng, 50)
    a = encode_prompt(cloud, ar_params, CFG).data
    b = encode_prompt(cloud.subset(rng.permutation(50)), ar_params, CFG).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_prompt_needs_normals(ar_params):
    with pytest.raises(MissingNormals):
        encode_prompt(PointCloud(np.zeros((5, 3))), ar_params, CFG)


def test_cross_entropy_limits():
    v = Vocabulary(CFG.coord_bins).size
    y = np.arange(5) % v
    assert ar_loss_from_logits(Tensor(np.zeros((5, v))), y).item() == pytest.approx(np.log(v), abs=1e-12)
    onehot = np.zeros((5, v))
    onehot[np.arange(5), y] = 30.0
    assert ar_loss_from_logits(Tensor(onehot), y).item() < 1e-9


def test_prefix_mask():
    m = prefix_mask(2, 3)
    assert np.all(m[:, :2] == 0)
    assert m[2, 3] < 0 and m[4, 3] == 0 and m[0, 4] < 0


def test_logits_are_causal(ar_params, rng):
    prompt = encode_prompt(random_cloud(rng), ar_params, CFG)
    toks = rng.integers(0, 12, 20)
    full = ar_forward(ar_params, prompt, toks, CFG).data
    for k in (1, 7, 19):
        np.testing.assert_allclose(ar_forward(ar_params, prompt, toks[:k], CFG).data, full[:k], atol=1e-10)


def test_generate_budget_of_one(ar_params, rng):
    seq = ar_generate(ar_params, random_cloud(rng), CFG, max_len=1)
    vocab = Vocabulary(CFG.coord_bins)
    assert seq.tokens == (vocab.bos,)
    rep = validate_generated(seq, detokenize_mesh(seq, vocab, strict=False).mesh, vocab)
    assert not rep.success and rep.reasons == ["NoStopToken"]


def test_temperature_sampling_seeded(ar_params, rng):
    cloud = random_cloud(rng)
    a = ar_generate(ar_params, cloud, CFG, temperature=1.0, seed=5)
    b = ar_generate(ar_params, cloud, CFG, temperature=1.0, seed=5)
    assert a == b
    vocab = Vocabulary(CFG.coord_bins)
    assert vocab.pad not in a.tokens and vocab.bos not in a.tokens[1:]


# --------------------------------------------------------------------------
# checkpoints and pipeline


def test_checkpoint_round_trip(tmp_path):
    params, _ = ar_case(0)
    save_params(tmp_path / "m.lcpt", params, {"stage": "ar"})
    assert (tmp_path / "m.lcpt").read_bytes()[:4] == b"LCPT"
    back, extra = load_params(tmp_path / "m.lcpt")
    assert extra == {"stage": "ar"} and list(back.arrays) == list(params.arrays)
    np.testing.assert_array_equal(back.flat(), params.flat().astype(np.float32))


def _all_params():
    params = ParamStore(0)
    for level in ("coarse", "fine"):
        init_vae(params, level, CFG)
        init_denoiser(params, level, CFG)
    init_prompt_encoder(params, CFG)
    init_ar(params, CFG)
    return params


def test_pipeline_stage_failure_names_stage():
    with pytest.raises(StageFailure) as err:
        generate_pipeline(PointCloud(np.zeros((0, 3))), _all_params(), CFG)
    assert err.value.stage == "input"


def test_pipeline_without_priors_uses_input(rng):
    cloud = PointCloud(rng.uniform(-0.8, 0.8, (200, 3)))
    res = generate_pipeline(cloud, _all_params(), CFG, GenerateConfig(no_priors=True, max_len=10))
    np.testing.assert_array_equal(res.p_out.positions, cloud.positions)
    assert res.coarse is None and res.fine is None
    assert len(res.tokens) <= 10


def test_pipeline_with_priors(rng):
    cloud = PointCloud(rng.uniform(-0.8, 0.8, (200, 3)))
    params = _all_params()
    for k in params.arrays:
        if k.endswith("keep0.b") or k.endswith("keep1.b"):
            params.arrays[k][:] = 5.0  # keep everything so the decoders never empty out
    res = generate_pipeline(cloud, params, CFG, GenerateConfig(max_len=12))
    assert res.coarse.resolution == CFG.coarse_res and res.fine.resolution == CFG.fine_res
    assert len(res.p_out) == len(res.fine)
