"""Noise schedule, toy denoiser, DDIM sampler and the synthetic-canvas trainer."""

from .model import EmbeddingTables, ToyDenoiser, TrainExample, denoiser_forward, init_model, rec_loss
from .sampler import GenerationResult, sample
from .schedule import Schedule, ddim_step, forward_diffuse, make_schedule, timesteps
from .toy import PALETTE, ToyAssets, ToyDataConfig, TrainConfig, train_toy

__all__ = [
    "EmbeddingTables", "GenerationResult", "PALETTE", "Schedule", "ToyAssets", "ToyDataConfig", "ToyDenoiser",
    "TrainConfig", "TrainExample", "ddim_step", "denoiser_forward", "forward_diffuse", "init_model",
    "make_schedule", "rec_loss", "sample", "timesteps", "train_toy",
]
