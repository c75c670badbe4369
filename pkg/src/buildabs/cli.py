"""Command line: simulate | preprocess | train | generate | evaluate.

Every command reads one JSON run config (``--config``), optionally patched
with dotted ``--set key.sub=value`` overrides; ``LOCADIT_SEED`` replaces the
seed. Outputs land under ``paths.out_dir/<command>/`` and checkpoints under
``paths.checkpoints``.

Exit codes: 0 ok, 2 bad input, 3 stage run out of order, 4 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import BuildAbsError, FormatError, StageFailure
from .geometry import PolyMesh, normalize, normalize_mesh
from .io import read_cloud, read_obj, write_obj, write_ply
from .locadit.config import ModelConfig
from .locadit.nn import ParamStore, load_params, save_params
from .locadit.pipeline import GenerateConfig, generate_pipeline
from .locadit.train import STAGE_ORDER, TrainConfig, encode_latents, prompt_cloud, train_ar, train_diffusion, train_vae
from .metrics import EvalConfig, evaluate_report
from .preprocess import ground_truth_cloud, prepare_sample
from .rng import derive_seed
from .simulate import ScenarioConfig, simulate
from .tokenizer import Vocabulary, load_tokens, save_tokens
from .voxel import load_grid, save_grid

log = logging.getLogger("buildabs")

EXIT_OK, EXIT_INPUT, EXIT_ORDER, EXIT_INTERNAL = 0, 2, 3, 4
CLOUD_SUFFIXES = (".ply", ".xyz")


class InputError(Exception):
    pass


class OrderError(Exception):
    pass


# --------------------------------------------------------------------------
# config


@dataclass
class Paths:
    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoints: str = "runs/checkpoints"


def default_stage_budgets() -> dict:
    return {
        "vae-coarse": TrainConfig(iters=2000, lr=3e-3, batch=1),
        "vae-fine": TrainConfig(iters=1000, lr=1e-2, batch=1),
        "diffusion-coarse": TrainConfig(iters=3000, lr=3e-3, batch=1, draws=2),
        "diffusion-fine": TrainConfig(iters=1000, lr=3e-3, batch=1, draws=2),
        "ar": TrainConfig(iters=1500, lr=1e-3, batch=1),
    }


@dataclass
class RunConfig:
    """Everything a run needs. ``seed`` is the single source of randomness:
    it overrides the seed fields of the nested configs."""

    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    n_points: int = 20000
    normalize_input: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=default_stage_budgets)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)

    def __post_init__(self):
        lam = (self.model.lambda_bce, self.model.lambda_l1, self.model.lambda_kl)
        if min(lam) < 0:
            raise InputError("loss weights must be non-negative")
        missing = set(STAGE_ORDER) - set(self.train)
        if missing:
            raise InputError(f"train budgets missing for {sorted(missing)}")
        self.scenario.seed = self.seed
        self.eval.seed = self.seed
        self.generate.seed = self.seed
        for tc in self.train.values():
            tc.seed = self.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = {k: asdict(v) for k, v in self.train.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            return cls(
                paths=Paths(**d.pop("paths", {})),
                model=ModelConfig(**d.pop("model", {})),
                train={k: TrainConfig(**v) for k, v in d.pop("train", {}).items()},
                scenario=ScenarioConfig(**d.pop("scenario", {})),
                eval=EvalConfig(**d.pop("eval", {})),
                generate=GenerateConfig(**d.pop("generate", {})),
                **d,
            )
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid config: {exc}") from exc


def _merge(base: dict, patch: dict) -> dict:
    out = dict(base)
    for k, v in patch.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_dotted(d: dict, key: str, raw: str) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise InputError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise InputError(f"unknown config key {key!r}")
    try:
        node[parts[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        node[parts[-1]] = raw


def load_config(path: str | None = None, overrides=(), env=None) -> RunConfig:
    env = os.environ if env is None else env
    d = RunConfig().to_dict()
    if path:
        try:
            d = _merge(d, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise InputError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_dotted(d, key.strip(), raw.strip())
    if env.get("LOCADIT_SEED"):
        try:
            d["seed"] = int(env["LOCADIT_SEED"])
        except ValueError as exc:
            raise InputError("LOCADIT_SEED must be an integer") from exc
    return RunConfig.from_dict(d)


# --------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _list(dir_: Path, suffixes) -> list[Path]:
    if not dir_.is_dir():
        raise InputError(f"directory not found: {dir_}")
    files = sorted(p for p in dir_.iterdir() if p.suffix.lower() in suffixes)
    if not files:
        raise InputError(f"no {'/'.join(suffixes)} files in {dir_}")
    return files


def _meshes(cfg: RunConfig):
    """(id, normalised mesh) for every OBJ in the data directory; unreadable
    files are logged and skipped."""
    out, failed = [], {}
    for path in _list(Path(cfg.paths.data_dir), (".obj",)):
        try:
            mesh, _ = normalize_mesh(read_obj(path))
            out.append((path.stem, mesh))
        except (BuildAbsError, OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            failed[path.stem] = str(exc)
    return out, failed


def _out(cfg: RunConfig, name: str) -> Path:
    p = Path(cfg.paths.out_dir) / name
    p.mkdir(parents=True, exist_ok=True)
    return p


def _ckpt(cfg: RunConfig, stage: str) -> Path:
    return Path(cfg.paths.checkpoints) / f"{stage}.lcpt"


def _need(cfg: RunConfig, stages) -> ParamStore:
    merged = ParamStore(cfg.seed, {"stage": "merged"})
    for stage in stages:
        path = _ckpt(cfg, stage)
        if not path.exists():
            raise OrderError(
                f"missing checkpoint for stage {stage!r} ({path}); "
                f"train stages in the order {' -> '.join(STAGE_ORDER)}"
            )
        params, _ = load_params(path)
        merged.merge(params)
    return merged


def _manifest(cfg: RunConfig, name: str, hint: str) -> dict:
    path = Path(cfg.paths.out_dir) / name / "manifest.json"
    if not path.exists():
        raise OrderError(f"{path} not found; run `buildabs {hint}` first")
    return json.loads(path.read_text())


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, args) -> int:
    meshes, failed = _meshes(cfg)
    out = _out(cfg, "simulate")
    (out / "gt").mkdir(exist_ok=True)
    (out / "inputs").mkdir(exist_ok=True)
    entries = {}
    for iid, mesh in meshes:
        try:
            gt = ground_truth_cloud(mesh, cfg.n_points, cfg.seed)
            sc = ScenarioConfig(cfg.scenario.scenario, derive_seed(cfg.seed, iid), cfg.scenario.sfm, cfg.scenario.sparse)
            p_in = simulate(gt, mesh, sc)
        except BuildAbsError as exc:
            log.warning("%s: %s", iid, exc)
            failed[iid] = str(exc)
            continue
        write_ply(out / "gt" / f"{iid}.ply", gt)
        write_ply(out / "inputs" / f"{iid}.ply", p_in)
        entries[iid] = {"gt": f"gt/{iid}.ply", "input": f"inputs/{iid}.ply", "points": len(p_in)}
        log.info("%s: %d input points", iid, len(p_in))
    _write_json(out / "manifest.json", {"scenario": cfg.scenario.to_dict(), "instances": entries, "failed": failed})
    if not entries:
        raise InputError("no instance could be simulated")
    print(f"simulated {len(entries)} instances into {out}")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, args) -> int:
    meshes, failed = _meshes(cfg)
    out = _out(cfg, "preprocess")
    m = cfg.model
    entries = {}
    for iid, mesh in meshes:
        try:
            s = prepare_sample(iid, mesh, m.coarse_res, m.fine_res, cfg.n_points, cfg.seed, Vocabulary(m.coord_bins))
        except BuildAbsError as exc:
            log.warning("%s: %s", iid, exc)
            failed[iid] = str(exc)
            continue
        save_grid(out / f"{iid}.coarse.lcvg", s.coarse)
        save_grid(out / f"{iid}.fine.lcvg", s.fine)
        save_tokens(out / f"{iid}.tokens.lcdt", s.tokens)
        entries[iid] = {
            "coarse_voxels": len(s.coarse),
            "fine_voxels": len(s.fine),
            "tokens": len(s.tokens),
            "fits_context": len(s.tokens) <= m.ar_max_len + 1,
        }
    _write_json(out / "manifest.json", {"model": m.to_dict(), "instances": entries, "failed": failed})
    if not entries:
        raise InputError("no instance could be preprocessed")
    print(f"preprocessed {len(entries)} instances into {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    stage = args.stage
    kind, _, level = stage.partition("-")
    if kind == "diffusion":
        vae = _need(cfg, [f"vae-{level}"])
    man = _manifest(cfg, "preprocess", "preprocess")
    pre = Path(cfg.paths.out_dir) / "preprocess"
    ids = sorted(man["instances"])
    tc, m = cfg.train[stage], cfg.model
    if man["model"]["coarse_res"] != m.coarse_res or man["model"]["fine_res"] != m.fine_res:
        raise InputError("preprocessed grid resolutions differ from the model config; rerun preprocess")
    if kind == "vae":
        grids = [load_grid(pre / f"{i}.{level}.lcvg") for i in ids]
        res = train_vae(grids, level, m, tc)
    elif kind == "diffusion":
        sim = _manifest(cfg, "simulate", "simulate")
        missing = [i for i in ids if i not in sim["instances"]]
        if missing:
            raise OrderError(f"no simulated inputs for {missing}; rerun simulate")
        sim_dir = Path(cfg.paths.out_dir) / "simulate"
        p_ins = [read_cloud(sim_dir / sim["instances"][i]["input"]) for i in ids]
        grids = [load_grid(pre / f"{i}.{level}.lcvg") for i in ids]
        latents = encode_latents(grids, level, vae, m)
        conds = [{"p_in": p} for p in p_ins]
        if level == "fine":
            for c, i in zip(conds, ids):
                c["coarse"] = load_grid(pre / f"{i}.coarse.lcvg")
        res = train_diffusion(latents, conds, level, m, tc)
    else:
        ids = [i for i in ids if man["instances"][i]["fits_context"]]
        if not ids:
            raise InputError("no token sequence fits the model context")
        prompts = [prompt_cloud(load_grid(pre / f"{i}.fine.lcvg")) for i in ids]
        seqs = [load_tokens(pre / f"{i}.tokens.lcdt") for i in ids]
        res = train_ar(prompts, seqs, m, tc)
    ckpt = _ckpt(cfg, stage)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_params(ckpt, res.params, {"stage": stage, "ids": ids, "train": asdict(tc)})
    res.write_log(ckpt.with_suffix(".log.ndjson"), stage)
    first, last = res.log[0]["loss"], res.log[-1]["loss"]
    print(f"{stage}: loss {first:.4f} -> {last:.4f} over {tc.iters} iterations; wrote {ckpt}")
    return EXIT_OK


def _required_stages(gen: GenerateConfig) -> list[str]:
    if gen.no_priors:
        return ["ar"]
    stages = []
    if not gen.skip_coarse:
        stages += ["vae-coarse", "diffusion-coarse"]
    if not gen.skip_fine:
        stages += ["vae-fine", "diffusion-fine"]
    return stages + ["ar"]


def cmd_generate(cfg: RunConfig, args) -> int:
    gen = cfg.generate
    for flag in ("no_priors", "skip_coarse", "skip_fine"):
        if getattr(args, flag):
            setattr(gen, flag, True)
    if args.max_len is not None:
        gen.max_len = args.max_len
    if args.temperature is not None:
        gen.temperature = args.temperature
    src = Path(args.input)
    inputs = [src] if src.is_file() else _list(src, CLOUD_SUFFIXES)
    params = _need(cfg, _required_stages(gen))
    out = Path(args.out) if args.out else _out(cfg, "generate")
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for path in inputs:
        iid = path.stem
        try:
            p_in = read_cloud(path)
        except (FormatError, OSError, ValueError) as exc:
            raise InputError(f"cannot read {path}: {exc}") from exc
        report: dict = {"id": iid, "input": str(path), "config": gen.to_dict()}
        if cfg.normalize_input:
            p_in, tf = normalize(p_in)
            report["normalization"] = tf.to_dict()
        try:
            result = generate_pipeline(p_in, params, cfg.model, gen)
            mesh = result.mesh
            report.update(result.summary())
            report["p_out_is_input"] = gen.no_priors
            if not gen.no_priors:
                write_ply(out / f"{iid}.p_out.ply", result.p_out)
                report["p_out"] = f"{iid}.p_out.ply"
        except StageFailure as exc:
            mesh = PolyMesh([], [])
            report.update({"success": False, "reasons": ["StageFailure"], "stage": exc.stage, "message": str(exc)})
        write_obj(out / f"{iid}.obj", mesh)
        _write_json(out / f"{iid}.report.json", report)
        summary[iid] = {"success": report["success"], "reasons": report["reasons"]}
        print(f"{iid}: {'ok' if report['success'] else 'failed ' + ','.join(report['reasons'])}")
    _write_json(out / "manifest.json", {"instances": summary, "flags": gen.to_dict()})
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    pred_dir = Path(args.pred) if args.pred else Path(cfg.paths.out_dir) / "generate"
    gt_dir = Path(args.gt) if args.gt else Path(cfg.paths.data_dir)
    preds = {p.stem: p for p in _list(pred_dir, (".obj",))}
    gts = {p.stem: p for p in _list(gt_dir, (".obj",) + CLOUD_SUFFIXES)}
    ids = sorted(set(preds) & set(gts))
    if not ids:
        raise InputError(f"no matching ids between {pred_dir} and {gt_dir}")
    pairs = []
    for iid in ids:
        pred = read_obj(preds[iid])
        g = gts[iid]
        gt = normalize_mesh(read_obj(g))[0] if g.suffix == ".obj" else read_cloud(g)
        entry = {"id": iid, "prediction": pred, "ground_truth": gt}
        rep = pred_dir / f"{iid}.report.json"
        if rep.exists():
            r = json.loads(rep.read_text())
            entry["success"], entry["reasons"] = bool(r.get("success", True)), list(r.get("reasons", []))
        pairs.append(entry)
    report = evaluate_report(pairs, cfg.eval)
    out = Path(args.out) if args.out else _out(cfg, "evaluate") / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    print(report.summary_table())
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="buildabs", description="Building abstraction from degraded point clouds")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="sample GT clouds and degraded inputs from meshes")
    sub.add_parser("preprocess", help="voxel grids and token sequences for training")
    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", required=True, choices=STAGE_ORDER)
    g = sub.add_parser("generate", help="run the pipeline on input clouds")
    g.add_argument("--input", required=True, help="cloud file or directory of clouds")
    g.add_argument("--out", help="output directory")
    g.add_argument("--no-priors", dest="no_priors", action="store_true")
    g.add_argument("--skip-coarse", dest="skip_coarse", action="store_true")
    g.add_argument("--skip-fine", dest="skip_fine", action="store_true")
    g.add_argument("--max-len", dest="max_len", type=int)
    g.add_argument("--temperature", type=float)
    e = sub.add_parser("evaluate", help="metrics of predicted meshes against ground truth")
    e.add_argument("--pred", help="directory of predicted OBJ meshes")
    e.add_argument("--gt", help="directory of ground-truth meshes or clouds")
    e.add_argument("--out", help="metrics JSON path")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except Exception:  # anything else is a bug or a broken invariant
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
