"""
Latent transform - lossless space-to-depth in place of a learned autoencoder
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Union

import torch
import torch.nn.functional as F

from utils.errors import IndivisibleDimensions, ShapeMismatch


@dataclass
class LatentState:
    z: torch.Tensor             # (..., M, C_z, h, w)
    timestep: int = 0

    def __post_init__(self):
        if self.timestep < 0:
            raise ValueError("timestep must be >= 0")

    def with_z(self, z: torch.Tensor, timestep: int) -> "LatentState":
        return LatentState(z=z, timestep=timestep)


class LatentCodec(Protocol):
    factor: int

    def encode(self, images: torch.Tensor) -> torch.Tensor: ...

    def decode(self, z: torch.Tensor) -> torch.Tensor: ...


class SpaceToDepthCodec:
    """
    (..., C, H, W) -> (..., C*f*f, H/f, W/f).

    Channel c*f*f + dy*f + dx of latent cell (y, x) holds pixel
    (c, y*f + dy, x*f + dx).
    """

    def __init__(self, factor: int = 4):
        if factor < 1:
            raise ValueError("latent factor must be >= 1")
        self.factor = factor

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % self.factor or w % self.factor:
            raise IndivisibleDimensions(
                f"image size {h}x{w} is not divisible by the latent factor {self.factor}")
        lead = images.shape[:-3]
        flat = images.reshape(-1, *images.shape[-3:])
        z = F.pixel_unshuffle(flat, self.factor)
        return z.reshape(*lead, *z.shape[1:])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-3] % (self.factor ** 2):
            raise ShapeMismatch(f"latent channels {z.shape[-3]} not divisible by {self.factor ** 2}")
        lead = z.shape[:-3]
        flat = z.reshape(-1, *z.shape[-3:])
        x = F.pixel_shuffle(flat, self.factor)
        return x.reshape(*lead, *x.shape[1:])


def encode_latent(images: Union[torch.Tensor, "MultiViewSample"],
                  codec: LatentCodec | None = None) -> LatentState:
    """Encode views (M, 3, H, W), a batch (B, M, 3, H, W) or a sample's views to t=0 latents."""
    codec = codec or SpaceToDepthCodec()
    views = getattr(images, "views", images)
    if not isinstance(views, torch.Tensor):
        views = torch.as_tensor(views)
    return LatentState(z=codec.encode(views), timestep=0)


def decode_latent(z: Union[LatentState, torch.Tensor], codec: LatentCodec | None = None) -> torch.Tensor:
    codec = codec or SpaceToDepthCodec()
    return codec.decode(z.z if isinstance(z, LatentState) else z)
