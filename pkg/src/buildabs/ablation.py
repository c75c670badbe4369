"""Toy-scale end-to-end experiment: train every stage on a handful of
procedural buildings, then compare meshes generated with and without the
learned priors."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .geometry import sample_surface
from .locadit.config import ModelConfig
from .locadit.pipeline import GenerateConfig, generate_pipeline
from .locadit.train import TrainConfig, train_all
from .metrics import chamfer_l1
from .preprocess import prepare_sample
from .simulate import ScenarioConfig, simulate
from .toy import toy_buildings

log = logging.getLogger(__name__)


def toy_model_config() -> ModelConfig:
    """Half-resolution grids and a narrower token model: minutes on one core."""
    return ModelConfig(
        coarse_res=8,
        fine_res=32,
        vae_width=16,
        fine_vae_width=16,
        denoiser_width=16,
        ar_width=64,
        prompt_points=256,
    )


def toy_budgets(seed: int = 0) -> dict[str, TrainConfig]:
    return {
        "vae-coarse": TrainConfig(iters=2000, lr=3e-3, batch=1, seed=seed),
        "vae-fine": TrainConfig(iters=600, lr=1e-2, batch=1, seed=seed),
        "diffusion-coarse": TrainConfig(iters=3000, lr=3e-3, batch=1, seed=seed, draws=2),
        "diffusion-fine": TrainConfig(iters=1000, lr=3e-3, batch=1, seed=seed, draws=2),
        "ar": TrainConfig(iters=1500, lr=1e-3, batch=1, seed=seed),
    }


@dataclass
class AblationResult:
    ids: list
    cd_priors: list
    cd_no_priors: list
    success_priors: list
    success_no_priors: list
    timings: dict = field(default_factory=dict)

    @property
    def wins(self) -> int:
        """Instances where the prior path is at least as close to the truth."""
        return int(sum(a <= b for a, b in zip(self.cd_priors, self.cd_no_priors)))

    def table(self) -> str:
        rows = [f"{'id':<14}{'cd_priors':>12}{'cd_no_priors':>14}"]
        for i, a, b in zip(self.ids, self.cd_priors, self.cd_no_priors):
            rows.append(f"{i:<14}{a:>12.4f}{b:>14.4f}")
        rows.append(f"prior path wins or ties: {self.wins}/{len(self.ids)}")
        return "\n".join(rows)


def mesh_cd(mesh, gt, n: int = 4096, seed: int = 0) -> float:
    """Chamfer distance between a generated mesh surface and the truth;
    an empty mesh scores infinity."""
    if mesh.n_faces == 0:
        return float("inf")
    return chamfer_l1(sample_surface(mesh, n, seed), gt, n_samples=n, seed=seed)


def run_toy_ablation(
    n: int = 10,
    seed: int = 0,
    cfg: ModelConfig | None = None,
    budgets: dict | None = None,
    scenario: ScenarioConfig | None = None,
) -> AblationResult:
    cfg = cfg or toy_model_config()
    budgets = budgets or toy_budgets(seed)
    scenario = scenario or ScenarioConfig("sparse")
    times = {}
    t0 = time.perf_counter()
    samples = [
        prepare_sample(i, m, cfg.coarse_res, cfg.fine_res, n_points=8000, seed=seed)
        for i, m in toy_buildings(n, seed)
    ]
    p_ins = [
        simulate(s.gt, s.mesh, ScenarioConfig(scenario.scenario, seed + k, scenario.sfm, scenario.sparse))
        for k, s in enumerate(samples)
    ]
    times["prepare"] = time.perf_counter() - t0
    params, logs = train_all(samples, p_ins, cfg, budgets)
    times.update(logs["seconds"])
    t0 = time.perf_counter()
    cd_p, cd_n, ok_p, ok_n = [], [], [], []
    for s, p_in in zip(samples, p_ins):
        with_priors = generate_pipeline(p_in, params, cfg, GenerateConfig(seed=seed))
        without = generate_pipeline(p_in, params, cfg, GenerateConfig(seed=seed, no_priors=True))
        cd_p.append(mesh_cd(with_priors.mesh, s.gt))
        cd_n.append(mesh_cd(without.mesh, s.gt))
        ok_p.append(with_priors.report.success)
        ok_n.append(without.report.success)
        log.info("%s priors %.4f no-priors %.4f", s.id, cd_p[-1], cd_n[-1])
    times["generate"] = time.perf_counter() - t0
    return AblationResult([s.id for s in samples], cd_p, cd_n, ok_p, ok_n, times)
