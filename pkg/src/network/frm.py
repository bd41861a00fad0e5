"""
Fusion refiner: per-view conv + squeeze-and-excitation residual, and the
cross-view consistency loss over neighbouring view pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Union

import torch
import torch.nn as nn

from geometry.view_graph import ViewGraph
from utils.errors import NonFiniteInput, ShapeMismatch

Scalar = Union[float, torch.Tensor]


def _to_float(value: Scalar) -> float:
    if isinstance(value, torch.Tensor):
        return value.detach().item()
    return float(value)


class SqueezeExcitation(nn.Module):
    """Global average pool -> bottleneck -> sigmoid, one gate per channel."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        reduced = max(channels // reduction, 1)
        self.squeeze = nn.AdaptiveAvgPool2d(1)
        self.excitation = nn.Sequential(
            nn.Conv2d(channels, reduced, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(reduced, channels, kernel_size=1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.excitation(self.squeeze(x))


class FusionRefiner(nn.Module):
    """F = Z~ + f(Z~) * A(f(Z~)), f = conv3x3 -> SiLU -> conv3x3 (last conv zero-init)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.se = SqueezeExcitation(channels, reduction)
        self.enabled = True
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def disable(self):
        """Zero and freeze the residual branch's last conv; refine becomes identity."""
        with torch.no_grad():
            self.conv2.weight.zero_()
            self.conv2.bias.zero_()
        self.conv2.weight.requires_grad_(False)
        self.conv2.bias.requires_grad_(False)
        self.enabled = False

    def branch(self, z: torch.Tensor) -> torch.Tensor:
        return self.conv2(self.act(self.conv1(z)))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return z
        if z.shape[-3] != self.channels:
            raise ShapeMismatch(f"expected {self.channels} channels, got {z.shape[-3]}")
        residual = self.branch(z)
        return z + residual * self.se(residual)


def refine(z_tilde: torch.Tensor, params: FusionRefiner) -> torch.Tensor:
    """Refine (C, H, W) or (N, C, H, W) features."""
    if z_tilde.dim() == 3:
        return params(z_tilde.unsqueeze(0)).squeeze(0)
    return params(z_tilde)


def refinement_loss(features: Mapping[int, torch.Tensor], graph: ViewGraph) -> torch.Tensor:
    """
    L_r = mean over levels of mean over ordered pairs (i, j) in P of
    ||F_i - F_j||^2 summed over C, H, W. Batched inputs (B, M, C, H, W)
    are also averaged over B.
    """
    pairs = graph.pairs
    if not features:
        raise ShapeMismatch("refinement loss needs at least one level")
    if not pairs:
        first = next(iter(features.values()))
        return first.new_zeros(())

    src = torch.tensor([i for i, _ in pairs])
    dst = torch.tensor([j for _, j in pairs])
    per_level = []
    for level in sorted(features):
        f = features[level]
        if f.dim() == 4:
            f = f.unsqueeze(0)
        if f.dim() != 5 or f.shape[1] != graph.num_views:
            raise ShapeMismatch(
                f"level {level}: expected (B, {graph.num_views}, C, H, W), got {tuple(f.shape)}")
        diff = f[:, src] - f[:, dst]
        per_level.append(diff.pow(2).sum(dim=(2, 3, 4)).mean())
    return torch.stack(per_level).mean()


@dataclass
class LossReport:
    l_d: Scalar
    l_r: Scalar
    l_total: Scalar
    lambda_: float

    def to_dict(self) -> Dict[str, Any]:
        return {"l_d": _to_float(self.l_d), "l_r": _to_float(self.l_r),
                "l_total": _to_float(self.l_total), "lambda": float(self.lambda_)}


def total_loss(l_d: Scalar, l_r: Scalar, lambda_: float) -> LossReport:
    """L_total = L_d + lambda * L_r; works on floats and on autograd scalars."""
    for name, value in (("l_d", l_d), ("l_r", l_r), ("lambda", lambda_)):
        number = _to_float(value)
        if not math.isfinite(number):
            raise NonFiniteInput(f"{name} is not finite: {number}")
    return LossReport(l_d=l_d, l_r=l_r, l_total=l_d + lambda_ * l_r, lambda_=float(lambda_))
