import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from buildabs.locadit.config import ModelConfig  # noqa: E402

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    """Smallest shapes every module accepts: quick forward passes and cheap
    finite differences."""
    base = dict(
        coarse_res=4,
        fine_res=16,
        latent_dim=2,
        vae_width=3,
        fine_vae_width=3,
        denoiser_width=4,
        denoiser_layers=1,
        cond_channels=2,
        time_dim=4,
        prompt_len=3,
        prompt_freqs=1,
        prompt_points=12,
        ar_width=8,
        ar_heads=2,
        ar_blocks=1,
        ar_max_len=40,
        coord_bins=8,
        diffusion_steps=10,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
