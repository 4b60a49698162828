"""Linear noise schedule, forward process and the deterministic DDIM update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    betas: np.ndarray  # betas[t - 1] for t = 1..T
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product for timestep ``t``; ``t == 0`` means clean data."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    return Schedule(betas, np.cumprod(1.0 - betas))


def forward_diffuse(z0, t: int, eps, schedule: Schedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} differs from latent shape {z0.shape}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: Schedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM move from ``t`` to ``t_prev``."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_hat = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    if t_prev == 0:
        return x0_hat
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def timesteps(T: int, steps: int) -> list[int]:
    """Uniformly strided, strictly decreasing subsequence of ``T..1``."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    return [int(v) for v in np.round(np.linspace(T, 1, steps))]
