"""Noise schedule and the closed-form forward (noising) process."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.alpha_bar, dtype=dtype)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def ddim_timesteps(self, steps: int) -> np.ndarray:
        """Descending, strictly decreasing step indices ending at 0."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        steps = min(steps, self.T)
        ts = np.round(np.linspace(0, self.T - 1, steps)).astype(np.int64)
        return ts[::-1].copy()


def forward_noise(x0, t: int, noise, schedule: DiffusionSchedule):
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`` for a single step index."""
    if not 0 <= int(t) < schedule.T:
        raise IndexError(f"t={t} outside [0, {schedule.T})")
    abar = float(schedule.alpha_bar[int(t)])
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def q_sample(x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor, alpha_bar: torch.Tensor) -> torch.Tensor:
    """Batched forward process; ``t`` holds one step index per batch item."""
    a = alpha_bar[t].view(-1, *([1] * (x0.dim() - 1)))
    return a.sqrt() * x0 + (1.0 - a).sqrt() * noise
