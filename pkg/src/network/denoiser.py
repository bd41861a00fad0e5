"""
View-aligned denoiser: a small U-Net whose decoder levels each run
ResBlock -> MultiViewAlignment -> FusionRefiner and expose the refined
features F^(l).

Decoder levels are numbered L..1 in execution order, so level L is the
coarsest. With two encoder downsamplings the scale of level l relative to
the latent grid is 2^-max(0, l - 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from geometry.homography import Homography, ViewPair, homography_key
from geometry.view_graph import ViewGraph, build_view_graph
from geometry.window import build_alignment_plan
from network.frm import FusionRefiner
from network.mvam import MultiViewAlignment, plan_tensors
from utils.config import AlignConfig, ModelConfig
from utils.errors import ShapeMismatch


def timestep_embedding(timesteps: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(timesteps.device)
    args = timesteps.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.shortcut(x)


@dataclass
class GeometryContext:
    """Per-batch geometry: the view graph and each sample's homography set."""

    graph: ViewGraph
    homographies: List[Mapping[ViewPair, Homography]]
    image_scale: float                  # latent grid size / image grid size
    _keys: List[str] = field(default_factory=list, repr=False)

    def keys(self) -> List[str]:
        if len(self._keys) != len(self.homographies):
            self._keys = [homography_key(h) for h in self.homographies]
        return self._keys

    def subset(self, indices: Sequence[int]) -> "GeometryContext":
        return GeometryContext(self.graph, [self.homographies[i] for i in indices], self.image_scale)

    @classmethod
    def shared(cls, graph: ViewGraph, homographies: Mapping[ViewPair, Homography],
               batch: int, image_scale: float) -> "GeometryContext":
        return cls(graph, [homographies] * batch, image_scale)


@dataclass
class _DecoderSpec:
    level: int
    in_ch: int
    out_ch: int
    exponent: int               # scale = 2^-exponent relative to latent
    upsample_before: bool


class ViewAlignDenoiser(nn.Module):
    """eps_theta(Z_t, t) over (B, M, C_z, h, w) latents."""

    def __init__(self, config: ModelConfig, num_views: int,
                 align: Optional[AlignConfig] = None):
        super().__init__()
        self.config = config
        self.num_views = num_views
        self.align = align or AlignConfig()
        self.graph = build_view_graph(num_views, config.topology, config.neighbors)

        c0 = config.base_channels
        widths = [c0 * m for m in config.channel_mult]
        groups = config.norm_groups
        emb_dim = 4 * c0
        n_down = len(widths)
        self.num_levels = config.num_decoder_levels

        self.time_embed = nn.Sequential(nn.Linear(c0, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(config.latent_channels, c0, 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.enc_mvam = nn.ModuleList()
        skip_widths = [c0]
        ch = c0
        for w in widths:
            self.enc_blocks.append(ResBlock(ch, w, emb_dim, groups))
            self.enc_mvam.append(MultiViewAlignment(w, config.attention_dim, config.pe_base))
            self.downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            skip_widths.append(w)
            ch = w
        if not config.mvam_in_encoder:
            for module in self.enc_mvam:
                module.disable()

        self.mid = ResBlock(ch, ch, emb_dim, groups)

        self.specs: List[_DecoderSpec] = []
        self.dec_blocks = nn.ModuleList()
        self.dec_mvam = nn.ModuleList()
        self.dec_frm = nn.ModuleList()
        self.ups = nn.ModuleDict()
        skips = list(skip_widths)
        prev_exp = n_down
        for level in range(self.num_levels, 0, -1):
            exponent = max(0, level - (self.num_levels - n_down))
            if level == self.num_levels:
                in_ch, out_ch = ch, ch
            else:
                skip_ch = skips.pop()
                in_ch, out_ch = ch + skip_ch, skip_ch
            upsample = exponent < prev_exp
            if upsample:
                self.ups[str(level)] = nn.Conv2d(ch, ch, 3, padding=1)
            self.specs.append(_DecoderSpec(level, in_ch, out_ch, exponent, upsample))
            self.dec_blocks.append(ResBlock(in_ch, out_ch, emb_dim, groups))
            self.dec_mvam.append(MultiViewAlignment(out_ch, config.attention_dim, config.pe_base))
            self.dec_frm.append(FusionRefiner(out_ch, config.se_reduction))
            ch = out_ch
            prev_exp = exponent

        self.out_norm = nn.GroupNorm(groups, ch)
        self.conv_out = nn.Conv2d(ch, config.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

        if not config.use_mvam:
            self.disable_alignment()
        if not config.use_frm:
            self.disable_refinement()

        self._plan_cache: Dict[Tuple, Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}

    # ── ablation switches ───────────────────────────────────────────────────

    def disable_alignment(self):
        for module in list(self.dec_mvam) + list(self.enc_mvam):
            module.disable()

    def disable_refinement(self):
        for module in self.dec_frm:
            module.disable()

    def set_align(self, align: AlignConfig):
        self.align = align
        self._plan_cache.clear()

    def level_scale(self, level: int) -> float:
        """
        Grid size of decoder level `level` relative to the latent grid.

        Levels count down in execution order: level L (4 by default) is the
        first and coarsest decoder stage, level 1 the last and finest. The
        default score levels [4, 3] are therefore the two coarsest stages,
        at 1/4 and 1/2 of the latent grid.
        """
        for spec in self.specs:
            if spec.level == level:
                return 2.0 ** -spec.exponent
        raise KeyError(f"no decoder level {level}")

    # ── geometry ────────────────────────────────────────────────────────────

    def _plans(self, context: GeometryContext, height: int, width: int, latent_width: int,
               dtype: torch.dtype, device: torch.device):
        scale = context.image_scale * (width / latent_width)
        key = (tuple(context.keys()), height, width, round(scale, 12),
               self.align.radius, self.align.include_self, dtype, str(device))
        cached = self._plan_cache.get(key)
        if cached is None:
            plans = [
                build_alignment_plan(context.graph, homographies, height, width, scale,
                                     self.align.radius, self.align.include_self)
                for homographies in context.homographies
            ]
            cached = plan_tensors(plans, dtype, device)
            if len(self._plan_cache) > 64:
                self._plan_cache.clear()
            self._plan_cache[key] = cached
        return cached

    def _align(self, module: MultiViewAlignment, h: torch.Tensor,
               context: GeometryContext, latent_width: int) -> torch.Tensor:
        if not module.enabled:
            return h
        index, delta, mask = self._plans(context, h.shape[-2], h.shape[-1], latent_width,
                                         h.dtype, h.device)
        return module(h, index, delta, mask)

    # ── forward ─────────────────────────────────────────────────────────────

    def forward(self, z_t: torch.Tensor, t: torch.Tensor,
                context: GeometryContext) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
        """
        Args:
            z_t: (B, M, C_z, h, w) noisy latents
            t: (B,) integer timesteps
            context: geometry for the B samples

        Returns:
            eps_hat shaped like z_t, and {level: (B, M, C_l, h_l, w_l)} refined features
        """
        if z_t.dim() != 5:
            raise ShapeMismatch(f"expected (B, M, C, h, w) latents, got {tuple(z_t.shape)}")
        b, m, cz, hz, wz = z_t.shape
        if cz != self.config.latent_channels:
            raise ShapeMismatch(f"expected {self.config.latent_channels} latent channels, got {cz}")
        if m != context.graph.num_views or len(context.homographies) != b:
            raise ShapeMismatch("geometry context does not match the batch")
        div = 2 ** len(self.config.channel_mult)
        if hz % div or wz % div:
            raise ShapeMismatch(f"latent sides must be divisible by {div}")

        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and b > 1:
            t = t.expand(b)
        t_emb = timestep_embedding(t.repeat_interleave(m), self.config.base_channels).to(z_t.dtype)
        t_emb = self.time_embed(t_emb)

        x = z_t.reshape(b * m, cz, hz, wz)
        h = self.conv_in(x)
        skips = [h]
        for block, mvam, down in zip(self.enc_blocks, self.enc_mvam, self.downs):
            h = block(h, t_emb)
            h = self._align(mvam, h, context, wz)
            skips.append(h)
            h = down(h)

        h = self.mid(h, t_emb)

        features: Dict[int, torch.Tensor] = {}
        for spec, block, mvam, frm in zip(self.specs, self.dec_blocks, self.dec_mvam, self.dec_frm):
            if spec.upsample_before:
                h = self.ups[str(spec.level)](F.interpolate(h, scale_factor=2.0, mode="nearest"))
            if spec.level != self.num_levels:
                h = torch.cat([h, skips.pop()], dim=1)
            h = block(h, t_emb)
            h = self._align(mvam, h, context, wz)
            h = frm(h)
            features[spec.level] = h.reshape(b, m, *h.shape[1:])

        eps_hat = self.conv_out(F.silu(self.out_norm(h)))
        return eps_hat.reshape(b, m, cz, hz, wz), features

