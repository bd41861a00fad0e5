"""
Noise schedules and the forward (noising) process
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from diffusion.latent import LatentState
from utils.config import ScheduleKind
from utils.errors import ShapeMismatch

BETA_START = 1e-4
BETA_END = 2e-2
COSINE_OFFSET = 0.008
BETA_CLIP = (1e-5, 0.9999)


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_bar[t - 1] holds alpha_bar_t for t = 1..T; alpha_bar_0 is 1."""

    T: int
    kind: str
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Gather alpha_bar for a batch of integer timesteps (0 maps to 1)."""
        table = torch.from_numpy(np.concatenate([[1.0], self.alpha_bar]))
        return table[t.long().cpu()].to(device=t.device, dtype=dtype)

    def describe(self) -> dict:
        return {"T": self.T, "kind": self.kind}


def make_schedule(T: int, kind: ScheduleKind | str = ScheduleKind.LINEAR_BETA) -> NoiseSchedule:
    """
    Build a schedule of T steps.

    linear_beta: beta_t evenly spaced in [1e-4, 2e-2], alpha_bar = cumprod(1 - beta).
    cosine: squared-cosine alpha_bar profile, turned into per-step betas clipped
    to [1e-5, 0.9999] and re-accumulated so alpha_bar stays strictly decreasing.
    """
    if T < 2:
        raise ValueError("a schedule needs T >= 2")
    kind = ScheduleKind(kind)

    if kind == ScheduleKind.LINEAR_BETA:
        betas = np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
    else:
        def f(t: np.ndarray) -> np.ndarray:
            return np.cos((t / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

        steps = np.arange(T + 1, dtype=np.float64)
        profile = f(steps) / f(np.zeros(1))
        betas = np.clip(1.0 - profile[1:] / profile[:-1], *BETA_CLIP)

    alpha_bar = np.cumprod(1.0 - betas)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T=T, kind=kind.value, alpha_bar=alpha_bar)


Scalar = Union[float, torch.Tensor]


def mix(z0: torch.Tensor, eps: torch.Tensor, alpha_bar: Scalar) -> torch.Tensor:
    """sqrt(alpha_bar) z0 + sqrt(1 - alpha_bar) eps; alpha_bar broadcasts from the left."""
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"noise shape {tuple(eps.shape)} differs from latent {tuple(z0.shape)}")
    a = torch.as_tensor(alpha_bar, dtype=z0.dtype, device=z0.device)
    while a.dim() and a.dim() < z0.dim():
        a = a.unsqueeze(-1)
    return torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps


def forward_noise(z0: LatentState, t: int, eps: torch.Tensor,
                  schedule: NoiseSchedule) -> LatentState:
    """Z_t = sqrt(alpha_bar_t) Z_0 + sqrt(1 - alpha_bar_t) eps for t in [1, T]."""
    if not 1 <= int(t) <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    return LatentState(z=mix(z0.z, eps, schedule.alpha_bar_at(t)), timestep=int(t))
