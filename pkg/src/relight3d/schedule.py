"""DDPM noise schedule shared by diffusion training, sampling, and distillation."""

from __future__ import annotations

import torch


class DdpmSchedule:
    """Linear-beta DDPM schedule.

    betas rise linearly from `beta_start` to `beta_end` over T steps;
    alpha_bar[t] is the running product of (1 - beta).
    """

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 2:
            raise ValueError("T must be >= 2")
        if not (0.0 < beta_start < beta_end < 1.0):
            raise ValueError("need 0 < beta_start < beta_end < 1")
        self.T = T
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = torch.cumprod(self.alphas, dim=0)
        if self.alpha_bar[0] <= 0.99:
            raise ValueError("alpha_bar[0] must exceed 0.99")

    def gather(self, t: torch.Tensor | int, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t])) as tensors of `dtype`."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t >= self.T).any():
            raise ValueError(f"timestep out of range [0, {self.T})")
        ab = self.alpha_bar[t]
        return ab.sqrt().to(dtype), (1.0 - ab).sqrt().to(dtype)


def ddpm_forward(x0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, schedule: DdpmSchedule) -> torch.Tensor:
    """Noised sample x_t = sqrt(ab)*x0 + sqrt(1-ab)*eps.

    `t` may be a scalar or a tensor with one entry per leading-dim item of x0.
    """
    sqrt_ab, sqrt_1mab = schedule.gather(t, dtype=x0.dtype)
    if sqrt_ab.ndim > 0:
        if sqrt_ab.shape[0] != x0.shape[0]:
            raise ValueError(f"per-item t has {sqrt_ab.shape[0]} entries for batch of {x0.shape[0]}")
        shape = (x0.shape[0],) + (1,) * (x0.ndim - 1)
        sqrt_ab = sqrt_ab.reshape(shape)
        sqrt_1mab = sqrt_1mab.reshape(shape)
    return sqrt_ab * x0 + sqrt_1mab * eps


def strided_timesteps(schedule: DdpmSchedule, steps: int) -> list[int]:
    """Descending timestep subset for strided ancestral sampling."""
    if steps < 1 or steps > schedule.T:
        raise ValueError("steps must be in [1, T]")
    ts = torch.linspace(schedule.T - 1, 0, steps).round().long().tolist()
    out = []
    for t in ts:  # deduplicate while preserving order
        if not out or t != out[-1]:
            out.append(int(t))
    return out
