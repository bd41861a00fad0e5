"""
Anomaly scoring - weighted nearest-prototype distances per level, then max aggregation
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from core.memory_bank import ArrayLike, MemoryBank, flatten_positions, nearest_distances
from utils.config import ScoreConfig
from utils.errors import EmptyList, EmptyMap, LevelMismatch


@dataclass
class AnomalyScores:
    pixel_maps: np.ndarray          # (M, H, W) float64
    view_scores: List[float]
    sample_score: float

    def to_dict(self) -> dict:
        return {"view_scores": [float(s) for s in self.view_scores],
                "sample_score": float(self.sample_score)}


def _upsample(maps: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    if tuple(maps.shape[-2:]) == tuple(size):
        return maps
    return F.interpolate(maps.unsqueeze(1), size=size, mode="bilinear", align_corners=True).squeeze(1)


def level_distance_maps(query_features: Mapping[int, ArrayLike], bank: MemoryBank,
                        levels: Sequence[int], k: int = 1) -> Dict[int, torch.Tensor]:
    """Per level, (M, h, w) float64 distance to the nearest prototype."""
    maps: Dict[int, torch.Tensor] = {}
    for level in levels:
        if level not in query_features:
            raise LevelMismatch(f"query features lack level {level}")
        if level not in bank.levels:
            raise LevelMismatch(f"bank lacks level {level} (has {bank.level_ids})")
        feats = query_features[level]
        m, c, h, w = feats.shape
        if c != bank.dim(level):
            raise LevelMismatch(f"level {level}: query width {c} != bank width {bank.dim(level)}")
        dist = nearest_distances(flatten_positions(feats), bank.levels[level], k)[:, 0]
        maps[level] = dist.reshape(m, h, w)
    return maps


def pixel_score(query_features: Mapping[int, ArrayLike], bank: MemoryBank, cfg: ScoreConfig,
                image_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    S(u, v) = sum_l w_l min_m ||F_l(u, v) - m||.

    Coarser levels are upsampled bilinearly (corner aligned) to the finest
    level's grid before summing; the sum is then upsampled to `image_size`.

    Returns:
        (M, H, W) float64 maps
    """
    weights = cfg.weights()
    distances = level_distance_maps(query_features, bank, cfg.levels)
    finest = max((d.shape[-2:] for d in distances.values()), key=lambda s: s[0] * s[1])
    total = None
    for level in cfg.levels:
        term = weights[level] * _upsample(distances[level], tuple(finest))
        total = term if total is None else total + term
    if image_size is not None:
        total = _upsample(total, tuple(image_size))
    maps = total.numpy()
    if cfg.gaussian_sigma > 0:
        maps = np.stack([gaussian_filter(view, sigma=cfg.gaussian_sigma) for view in maps])
    return maps


def view_score(pixel_map: np.ndarray) -> float:
    pixel_map = np.asarray(pixel_map)
    if pixel_map.size == 0:
        raise EmptyMap("cannot score an empty map")
    return float(pixel_map.max())


def sample_score(view_scores: Sequence[float]) -> float:
    if len(view_scores) == 0:
        raise EmptyList("cannot score a sample with no views")
    return float(max(view_scores))


def aggregate(pixel_maps: np.ndarray) -> AnomalyScores:
    views = [view_score(m) for m in pixel_maps]
    return AnomalyScores(pixel_maps=pixel_maps, view_scores=views, sample_score=sample_score(views))


def score_sample(query_features: Mapping[int, ArrayLike], bank: MemoryBank, cfg: ScoreConfig,
                 image_size: Tuple[int, int]) -> AnomalyScores:
    return aggregate(pixel_score(query_features, bank, cfg, image_size))
