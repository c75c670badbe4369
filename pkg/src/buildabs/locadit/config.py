from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    coarse_res: int = 16
    fine_res: int = 64
    latent_dim: int = 8
    vae_width: int = 32
    fine_vae_width: int = 16
    denoiser_width: int = 32
    denoiser_layers: int = 3
    cond_channels: int = 4
    time_dim: int = 32
    prompt_len: int = 16
    prompt_freqs: int = 4
    prompt_points: int = 512
    ar_width: int = 128
    ar_heads: int = 4
    ar_blocks: int = 2
    ar_max_len: int = 256
    coord_bins: int = 128
    lambda_bce: float = 20.0
    lambda_l1: float = 50.0
    lambda_kl: float = 0.03
    diffusion_steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2

    def __post_init__(self):
        if self.fine_res != 4 * self.coarse_res:
            raise ValueError("fine resolution must be four times the coarse one")
        if self.ar_width % self.ar_heads:
            raise ValueError("ar_width must be divisible by ar_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
