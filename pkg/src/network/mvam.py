"""
Multi-view alignment: attention over homography-projected search windows.

For every view i and cell p_i the candidate set is the union of the R x R
windows around H_{i->j} p_i in every neighbour j (plus, optionally, p_i in
view i itself). One softmax runs over the whole candidate set. The aligned
value is mapped back to C channels and added residually to the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from geometry.homography import Homography, ViewPair
from geometry.view_graph import ViewGraph
from geometry.window import AlignmentPlan, PosEncodingConfig, build_alignment_plan
from utils.config import AlignConfig
from utils.errors import DimensionMismatch, EmptyCandidateSet


@dataclass
class FeatureMap:
    data: torch.Tensor          # (M, C, H, W)
    resolution_scale: float     # grid size relative to the image grid

    def __post_init__(self):
        if self.data.dim() != 4 or min(self.data.shape) < 1:
            raise DimensionMismatch(f"feature map must be (M, C, H, W), got {tuple(self.data.shape)}")
        if not 0 < self.resolution_scale <= 1:
            raise ValueError("resolution_scale must lie in (0, 1]")


def encode_displacements(delta: torch.Tensor, cfg: PosEncodingConfig) -> torch.Tensor:
    """Torch version of geometry.window.positional_encoding over (..., 2) -> (..., dim)."""
    freqs = torch.as_tensor(cfg.frequencies(), dtype=delta.dtype, device=delta.device)
    parts = []
    for axis in range(2):
        ang = delta[..., axis:axis + 1] * freqs
        parts.append(torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2))
    return torch.cat(parts, dim=-1)


class MultiViewAlignment(nn.Module):
    """Learnable W_q, W_k, W_v (C -> d) and the output map (d -> C)."""

    def __init__(self, channels: int, attention_dim: Optional[int] = None,
                 pe_base: float = 10000.0):
        super().__init__()
        d = attention_dim or channels
        self.channels = channels
        self.attention_dim = d
        self.pe_config = PosEncodingConfig(channels, pe_base)
        self.w_q = nn.Linear(channels, d, bias=False)
        self.w_k = nn.Linear(channels, d, bias=False)
        self.w_v = nn.Linear(channels, d, bias=False)
        self.out_proj = nn.Linear(d, channels, bias=False)
        self.enabled = True
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.channels)
        for lin in (self.w_q, self.w_k, self.w_v):
            nn.init.uniform_(lin.weight, -bound, bound)
        nn.init.zeros_(self.out_proj.weight)

    def disable(self):
        """Zero and freeze the output map; the module becomes an exact identity."""
        with torch.no_grad():
            self.out_proj.weight.zero_()
        self.out_proj.weight.requires_grad_(False)
        self.enabled = False

    def forward(self, x: torch.Tensor, index: torch.Tensor, delta: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        """
        Args:
            x: (N, C, H, W) with N = samples * views, view-major per sample
            index: (N*H*W, K) rows into the flattened (N*H*W, C) features
            delta: (N*H*W, K, 2) displacements
            mask: (N*H*W, K) valid candidates

        Returns:
            (N, C, H, W) aligned features, x + out_proj(aggregate)
        """
        if not self.enabled:
            return x
        n, c, h, w = x.shape
        if c != self.channels:
            raise DimensionMismatch(f"expected {self.channels} channels, got {c}")
        flat = x.permute(0, 2, 3, 1).reshape(n * h * w, c)
        q, k, v = project_qkv(flat, flat[index], delta, self)
        aggregated = align_patch(q, k, v, mask)
        update = self.out_proj(aggregated) * mask.any(dim=-1, keepdim=True).to(x.dtype)
        return (flat + update).reshape(n, h, w, c).permute(0, 3, 1, 2)


# ─────────────────────────────────────────────────────────────────────────────
# Per-patch operations (broadcast over leading dims)
# ─────────────────────────────────────────────────────────────────────────────

def project_qkv(query_feat: torch.Tensor, cand_feat: torch.Tensor, delta: torch.Tensor,
                params: MultiViewAlignment) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    q = W_q f_q ; k = W_k (f_c + gamma(delta)) ; v = W_v (f_c + gamma(delta))

    Args:
        query_feat: (..., C)
        cand_feat: (..., K, C) or (..., C)
        delta: displacements matching cand_feat's leading shape, last dim 2
    """
    c = params.channels
    if query_feat.shape[-1] != c or cand_feat.shape[-1] != c:
        raise DimensionMismatch(f"feature width must be {c}")
    if delta.shape[-1] != 2 or delta.shape[:-1] != cand_feat.shape[:-1]:
        raise DimensionMismatch("delta must be shaped like the candidates with a trailing 2")
    shifted = cand_feat + encode_displacements(delta, params.pe_config)
    return params.w_q(query_feat), params.w_k(shifted), params.w_v(shifted)


def attention_weights(q: torch.Tensor, keys: torch.Tensor,
                      mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    alpha_j = softmax_j(q . k_j / sqrt(d)), max-subtracted.

    Args:
        q: (..., d)
        keys: (..., K, d)
        mask: optional (..., K); masked slots get weight 0, fully masked
            rows get all-zero weights

    Returns:
        (..., K) weights
    """
    if keys.shape[-2] == 0:
        raise EmptyCandidateSet("attention needs at least one key")
    d = q.shape[-1]
    logits = torch.matmul(keys, q.unsqueeze(-1)).squeeze(-1) / math.sqrt(d)
    if mask is None:
        shifted = logits - logits.max(dim=-1, keepdim=True).values
        expo = torch.exp(shifted)
        return expo / expo.sum(dim=-1, keepdim=True)

    if mask.ndim == 1 and keys.ndim == 2 and not bool(mask.any()):
        raise EmptyCandidateSet("every candidate is masked")
    neg_inf = torch.finfo(logits.dtype).min
    filled = logits.masked_fill(~mask, neg_inf)
    peak = filled.max(dim=-1, keepdim=True).values.detach()
    expo = torch.exp(filled - peak) * mask.to(logits.dtype)
    total = expo.sum(dim=-1, keepdim=True)
    return expo / torch.where(total > 0, total, torch.ones_like(total))


def align_patch(q: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
                mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """X~_i(p_i) = sum_j alpha_j v_j over (..., K, d) keys/values."""
    if values.shape[-2] == 0:
        raise EmptyCandidateSet("alignment needs at least one candidate")
    alpha = attention_weights(q, keys, mask)
    return torch.matmul(alpha.unsqueeze(-2), values).squeeze(-2)


# ─────────────────────────────────────────────────────────────────────────────
# Whole feature map
# ─────────────────────────────────────────────────────────────────────────────

def plan_tensors(plans: Sequence[AlignmentPlan], dtype: torch.dtype,
                 device: torch.device | str = "cpu") -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack per-sample plans into batch tensors with row offsets."""
    index, delta, mask = [], [], []
    offset = 0
    width = max(p.num_slots for p in plans)
    for plan in plans:
        rows, k = plan.index.shape
        idx = torch.as_tensor(plan.index + offset)
        dl = torch.as_tensor(plan.delta, dtype=dtype)
        mk = torch.as_tensor(plan.mask)
        if k < width:
            pad = width - k
            idx = torch.cat([idx, torch.full((rows, pad), offset, dtype=idx.dtype)], dim=1)
            dl = torch.cat([dl, torch.zeros(rows, pad, 2, dtype=dtype)], dim=1)
            mk = torch.cat([mk, torch.zeros(rows, pad, dtype=torch.bool)], dim=1)
        index.append(idx)
        delta.append(dl)
        mask.append(mk)
        offset += rows
    return (torch.cat(index).to(device), torch.cat(delta).to(device), torch.cat(mask).to(device))


def align_feature_map(x: FeatureMap, graph: ViewGraph,
                      homographies: Mapping[ViewPair, Homography],
                      params: MultiViewAlignment, cfg: AlignConfig) -> FeatureMap:
    """Align one sample's (M, C, H, W) features; output has the input's shape."""
    m, _, h, w = x.data.shape
    if m != graph.num_views:
        raise DimensionMismatch(f"feature map has {m} views, graph has {graph.num_views}")
    plan = build_alignment_plan(graph, homographies, h, w, x.resolution_scale,
                                cfg.radius, cfg.include_self)
    index, delta, mask = plan_tensors([plan], x.data.dtype, x.data.device)
    return FeatureMap(params(x.data, index, delta, mask), x.resolution_scale)
