import json
from pathlib import Path

import pytest

from buildabs.cli import EXIT_INPUT, EXIT_OK, EXIT_ORDER, InputError, load_config, main
from buildabs.io import read_cloud, write_obj
from buildabs.locadit.train import STAGE_ORDER
from buildabs.toy import toy_buildings

TINY = {
    "n_points": 3000,
    "model": {
        "coarse_res": 4, "fine_res": 16, "latent_dim": 2, "vae_width": 4, "fine_vae_width": 4,
        "denoiser_width": 4, "denoiser_layers": 1, "cond_channels": 2, "time_dim": 4,
        "prompt_len": 4, "prompt_freqs": 1, "prompt_points": 32, "ar_width": 16, "ar_heads": 2,
        "ar_blocks": 1, "ar_max_len": 400, "coord_bins": 16, "diffusion_steps": 10,
    },
    "train": {s: {"iters": 3, "batch": 1, "draws": 1} for s in STAGE_ORDER},
}


def write_config(root: Path, out="runs", ckpt="runs/ckpt", **extra) -> Path:
    cfg = {**TINY, **extra, "paths": {"data_dir": str(root / "data"), "out_dir": str(root / out), "checkpoints": str(root / ckpt)}}
    path = root / f"{out}-{ckpt.replace('/', '_')}.json"
    path.write_text(json.dumps(cfg))
    return path


def make_data(root: Path, n=3) -> None:
    (root / "data").mkdir(parents=True, exist_ok=True)
    for name, mesh in toy_buildings(n, seed=0):
        write_obj(root / "data" / f"{name}.obj", mesh)


def run(cfg: Path, *args) -> int:
    return main(["--config", str(cfg), *args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_data(root)
    cfg = write_config(root)
    assert run(cfg, "simulate") == EXIT_OK
    assert run(cfg, "preprocess") == EXIT_OK
    for stage in STAGE_ORDER:
        assert run(cfg, "train", "--stage", stage) == EXIT_OK
    return root, cfg


def test_full_flow(workspace):
    root, cfg = workspace
    inputs = root / "runs" / "simulate" / "inputs"
    assert run(cfg, "generate", "--input", str(inputs), "--max-len", "60") == EXIT_OK
    gen = root / "runs" / "generate"
    ids = sorted(p.stem for p in inputs.glob("*.ply"))
    assert sorted(p.stem for p in gen.glob("*.obj")) == ids
    for i in ids:
        rep = json.loads((gen / f"{i}.report.json").read_text())
        assert "success" in rep and "reasons" in rep
    assert run(cfg, "evaluate") == EXIT_OK
    metrics = json.loads((root / "runs" / "evaluate" / "metrics.json").read_text())
    assert len(metrics["instances"]) == 3
    failures = sum(not r["success"] for r in metrics["instances"])
    assert metrics["aggregate"]["fr"] == failures / 3


def test_simulate_and_preprocess_byte_deterministic(workspace):
    root, cfg = workspace
    again = write_config(root, out="again", ckpt="again/ckpt")
    assert run(again, "simulate") == EXIT_OK
    assert run(again, "preprocess") == EXIT_OK
    for sub in ("simulate", "preprocess"):
        a = {p.relative_to(root / "runs"): p.read_bytes() for p in (root / "runs" / sub).rglob("*") if p.is_file()}
        b = {p.relative_to(root / "again"): p.read_bytes() for p in (root / "again" / sub).rglob("*") if p.is_file()}
        assert a == b


def test_training_logs_reproducible(workspace):
    root, cfg = workspace
    again = write_config(root, out="runs", ckpt="ckpt2")
    assert run(again, "train", "--stage", "vae-coarse") == EXIT_OK
    log1 = (root / "runs" / "ckpt" / "vae-coarse.log.ndjson").read_text()
    log2 = (root / "ckpt2" / "vae-coarse.log.ndjson").read_text()
    assert log1 == log2 and len(log1.splitlines()) == 3


def test_no_priors_report(workspace, tmp_path):
    root, cfg = workspace
    src = next((root / "runs" / "simulate" / "inputs").glob("*.ply"))
    assert run(cfg, "generate", "--input", str(src), "--out", str(tmp_path), "--no-priors", "--max-len", "20") == EXIT_OK
    rep = json.loads((tmp_path / f"{src.stem}.report.json").read_text())
    assert rep["p_out_is_input"] is True and rep["flags"]["no_priors"] is True
    assert not (tmp_path / f"{src.stem}.p_out.ply").exists()


def test_tiny_budget_reports_no_stop_token(workspace, tmp_path):
    root, cfg = workspace
    src = next((root / "runs" / "simulate" / "inputs").glob("*.ply"))
    assert run(cfg, "generate", "--input", str(src), "--out", str(tmp_path), "--no-priors", "--max-len", "2") == EXIT_OK
    rep = json.loads((tmp_path / f"{src.stem}.report.json").read_text())
    assert rep["success"] is False and "NoStopToken" in rep["reasons"]


def test_sparse_scenario_counts(tmp_path):
    make_data(tmp_path)
    cfg = write_config(tmp_path, scenario={"scenario": "sparse"})
    assert run(cfg, "simulate") == EXIT_OK
    for p in (tmp_path / "runs" / "simulate" / "inputs").glob("*.ply"):
        assert 200 <= len(read_cloud(p)) <= 2000


def test_empty_data_dir(tmp_path, capsys):
    (tmp_path / "data").mkdir()
    assert run(write_config(tmp_path), "simulate") == EXIT_INPUT
    assert str(tmp_path / "data") in capsys.readouterr().err


def test_evaluate_without_matches(tmp_path, capsys):
    make_data(tmp_path, n=1)
    pred = tmp_path / "pred"
    pred.mkdir()
    write_obj(pred / "other.obj", toy_buildings(1, seed=0)[0][1])
    assert run(write_config(tmp_path), "evaluate", "--pred", str(pred)) == EXIT_INPUT
    assert "no matching ids" in capsys.readouterr().err


def test_diffusion_needs_its_vae(tmp_path, capsys):
    make_data(tmp_path, n=1)
    assert run(write_config(tmp_path), "train", "--stage", "diffusion-coarse") == EXIT_ORDER
    assert "vae-coarse -> vae-fine" in capsys.readouterr().err


def test_generate_needs_checkpoints(tmp_path):
    make_data(tmp_path, n=1)
    cfg = write_config(tmp_path)
    assert run(cfg, "simulate") == EXIT_OK
    assert run(cfg, "generate", "--input", str(tmp_path / "runs" / "simulate" / "inputs")) == EXIT_ORDER


def test_overrides_and_env_seed(tmp_path):
    cfg = write_config(tmp_path)
    rc = load_config(str(cfg), ["model.coord_bins=32", "scenario.scenario=sparse"], env={"LOCADIT_SEED": "9"})
    assert rc.model.coord_bins == 32 and rc.scenario.scenario == "sparse"
    assert rc.seed == 9 and rc.scenario.seed == 9 and rc.train["ar"].seed == 9 and rc.generate.seed == 9
    with pytest.raises(InputError):
        load_config(str(cfg), ["model.nope=1"], env={})
    with pytest.raises(InputError):
        load_config(str(cfg), [], env={"LOCADIT_SEED": "x"})


def test_bad_override_exit_code(tmp_path):
    assert main(["--config", str(write_config(tmp_path)), "--set", "model.nope=1", "simulate"]) == EXIT_INPUT
