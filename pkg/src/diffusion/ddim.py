"""
Deterministic DDIM (eta = 0) stepping, inversion and generation
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import torch

from diffusion.latent import LatentState
from diffusion.schedule import NoiseSchedule
from network.denoiser import GeometryContext, ViewAlignDenoiser
from utils.errors import InvalidTimestepPair, ShapeMismatch


def predict_noise(z_t: LatentState, t: int, context: GeometryContext,
                  model: ViewAlignDenoiser) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
    """
    eps_hat and the refined decoder features for (M, C, h, w) or (B, M, C, h, w) latents.

    Unbatched input gives unbatched outputs.
    """
    z = z_t.z
    single = z.dim() == 4
    if single:
        z = z.unsqueeze(0)
    if z.dim() != 5:
        raise ShapeMismatch(f"expected (M, C, h, w) or (B, M, C, h, w) latents, got {tuple(z_t.z.shape)}")
    timesteps = torch.full((z.shape[0],), int(t), dtype=torch.long, device=z.device)
    eps_hat, features = model(z, timesteps, context)
    if single:
        return eps_hat[0], {lvl: f[0] for lvl, f in features.items()}
    return eps_hat, features


def ddim_step(z_t: LatentState, eps_hat: torch.Tensor, t: int, t_next: int,
              schedule: NoiseSchedule) -> LatentState:
    """
    z0_hat = (z_t - sqrt(1 - a_t) eps) / sqrt(a_t)
    z_next = sqrt(a_next) z0_hat + sqrt(1 - a_next) eps

    t_next > t inverts (adds noise), t_next < t denoises.
    """
    t, t_next = int(t), int(t_next)
    if t == t_next:
        raise InvalidTimestepPair(f"t and t_next are both {t}")
    for value in (t, t_next):
        if not 0 <= value <= schedule.T:
            raise InvalidTimestepPair(f"timestep {value} outside [0, {schedule.T}]")
    if eps_hat.shape != z_t.z.shape:
        raise ShapeMismatch("eps_hat must match the latent shape")

    a_t = torch.as_tensor(schedule.alpha_bar_at(t), dtype=z_t.z.dtype)
    a_next = torch.as_tensor(schedule.alpha_bar_at(t_next), dtype=z_t.z.dtype)
    z0_hat = (z_t.z - torch.sqrt(1 - a_t) * eps_hat) / torch.sqrt(a_t)
    return LatentState(z=torch.sqrt(a_next) * z0_hat + torch.sqrt(1 - a_next) * eps_hat,
                       timestep=t_next)


def inversion_timesteps(steps: int, t_extract: int) -> List[int]:
    """Uniform grid 0 = t_0 < ... < t_steps = t_extract."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > t_extract:
        raise ValueError("more steps than timesteps to cover")
    return [int(round(k * t_extract / steps)) for k in range(steps + 1)]


@dataclass
class InversionResult:
    trajectory: List[LatentState]
    features: Dict[int, torch.Tensor] = field(default_factory=dict)

    @property
    def final(self) -> LatentState:
        return self.trajectory[-1]


def ddim_invert(z0: LatentState, steps: int, schedule: NoiseSchedule,
                model: ViewAlignDenoiser, context: GeometryContext,
                t_extract: int) -> InversionResult:
    """
    Run DDIM upward from t=0 to t_extract in `steps` uniform steps.

    The features returned are those of the predict_noise call made for the
    last step (t_{steps-1} -> t_extract).
    """
    grid = inversion_timesteps(steps, t_extract)
    state = LatentState(z=z0.z, timestep=0)
    trajectory = [state]
    features: Dict[int, torch.Tensor] = {}
    with torch.no_grad():
        for t, t_next in zip(grid[:-1], grid[1:]):
            eps_hat, features = predict_noise(state, t, context, model)
            state = ddim_step(state, eps_hat, t, t_next, schedule)
            trajectory.append(state)
    return InversionResult(trajectory=trajectory, features=features)


def ddim_generate(z_t: LatentState, steps: int, schedule: NoiseSchedule,
                  model: ViewAlignDenoiser, context: GeometryContext) -> LatentState:
    """Denoise from z_t.timestep back to 0 on the same uniform grid inversion uses."""
    grid = inversion_timesteps(steps, z_t.timestep)
    state = z_t
    with torch.no_grad():
        for t, t_next in zip(grid[:0:-1], grid[-2::-1]):
            eps_hat, _ = predict_noise(state, t, context, model)
            state = ddim_step(state, eps_hat, t, t_next, schedule)
    return state
