"""
Search windows around projected positions, displacement encoding, and the
vectorised alignment plan that gathers every window for a whole feature grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Tuple

import numpy as np

from geometry.homography import Homography, ViewPair, project_point, project_points, rescale_homography
from geometry.view_graph import ViewGraph
from utils.errors import EmptyWindow, MissingHomography, PointAtInfinity


@dataclass(frozen=True)
class SearchCandidate:
    view: int
    position: Tuple[int, int]      # (x, y) grid cell
    displacement: np.ndarray       # p_j - projected p_i, in grid cells


@dataclass(frozen=True)
class PosEncodingConfig:
    dim: int
    base_frequency: float = 10000.0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 4:
            raise ValueError(f"encoding dim must be a positive multiple of 4, got {self.dim}")
        if self.base_frequency <= 0:
            raise ValueError("base_frequency must be positive")

    def frequencies(self) -> np.ndarray:
        k = np.arange(self.dim // 4, dtype=np.float64)
        return self.base_frequency ** (-4.0 * k / self.dim)


def window_offsets(radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """(dx, dy) offsets of an R x R window, rows outer, top-left at -floor((R-1)/2)."""
    off = np.arange(radius) - (radius - 1) // 2
    oy, ox = np.meshgrid(off, off, indexing="ij")
    return ox.ravel(), oy.ravel()


def search_window(h: Homography, p_i, radius: int,
                  bounds: Tuple[int, int]) -> List[SearchCandidate]:
    """
    Enumerate the R x R candidate cells around round(H . p_i) in view h.dst_view.

    Args:
        h: homography at the feature-grid resolution
        p_i: integer (x, y) query position
        radius: window side R (>= 1)
        bounds: (height, width) of the destination grid

    Returns:
        In-bounds candidates, rows outer then columns
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    height, width = bounds
    if not (0 <= p_i[0] < width and 0 <= p_i[1] < height):
        raise ValueError(f"query position {tuple(p_i)} outside bounds {bounds}")

    try:
        projected = project_point(h, p_i)
    except PointAtInfinity as exc:
        raise EmptyWindow(str(exc)) from exc
    center = np.rint(projected)
    ox, oy = window_offsets(radius)

    candidates = []
    for dx, dy in zip(ox, oy):
        x, y = int(center[0] + dx), int(center[1] + dy)
        if 0 <= x < width and 0 <= y < height:
            candidates.append(SearchCandidate(
                view=h.dst_view,
                position=(x, y),
                displacement=np.array([x, y], dtype=np.float64) - projected,
            ))
    if not candidates:
        raise EmptyWindow(f"window around {tuple(projected)} lies outside {bounds}")
    return candidates


def positional_encoding(delta, cfg: PosEncodingConfig) -> np.ndarray:
    """
    gamma(delta): per axis [sin(f0 x), cos(f0 x), sin(f1 x), cos(f1 x), ...],
    x axis block first then y.
    """
    freqs = cfg.frequencies()
    parts = []
    for coord in (float(delta[0]), float(delta[1])):
        ang = coord * freqs
        parts.append(np.stack([np.sin(ang), np.cos(ang)], axis=-1).ravel())
    return np.concatenate(parts)


# ─────────────────────────────────────────────────────────────────────────────
# Alignment plan
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AlignmentPlan:
    """
    Candidate table for a (views x height x width) grid.

    Row r = view * H * W + y * W + x. Column slots: optional self slot first,
    then R*R slots per neighbour in N(i) order; unused slots are masked.
    """

    index: np.ndarray      # (M*H*W, K) int64 rows into the same flattening
    delta: np.ndarray      # (M*H*W, K, 2) float64 displacements (x, y)
    mask: np.ndarray       # (M*H*W, K) bool
    shape: Tuple[int, int, int]

    @property
    def num_slots(self) -> int:
        return self.index.shape[1]


def build_alignment_plan(graph: ViewGraph,
                         homographies: Mapping[ViewPair, Homography],
                         height: int, width: int, scale: float,
                         radius: int, include_self: bool = True) -> AlignmentPlan:
    """
    Precompute every search window of a feature grid.

    Args:
        graph: view adjacency
        homographies: image-resolution H_{i->j} for every pair in graph.pairs
        height, width: feature grid size
        scale: grid resolution relative to the image grid
        radius: window side R
        include_self: add the query cell of view i as a candidate
    """
    m = graph.num_views
    hw = height * width
    ys, xs = np.mgrid[0:height, 0:width]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    ox, oy = window_offsets(radius)
    r2 = radius * radius
    k = graph.max_degree * r2 + (1 if include_self else 0)

    index = np.zeros((m, hw, k), dtype=np.int64)
    delta = np.zeros((m, hw, k, 2), dtype=np.float64)
    mask = np.zeros((m, hw, k), dtype=bool)

    for i in range(m):
        col = 0
        if include_self:
            index[i, :, 0] = i * hw + np.arange(hw)
            mask[i, :, 0] = True
            col = 1
        for j in graph.neighbors[i]:
            if (i, j) not in homographies:
                raise MissingHomography(f"no homography for view pair ({i}, {j})")
            scaled = rescale_homography(homographies[(i, j)], scale, scale)
            proj, valid = project_points(scaled, grid)
            safe = np.where(valid[:, None], proj, 0.0)
            center = np.rint(safe)
            cx = center[:, 0:1] + ox[None, :]
            cy = center[:, 1:2] + oy[None, :]
            inside = valid[:, None] & (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
            flat = j * hw + cy * width + cx
            block = slice(col, col + r2)
            index[i, :, block] = np.where(inside, flat, 0).astype(np.int64)
            delta[i, :, block, 0] = np.where(inside, cx - safe[:, 0:1], 0.0)
            delta[i, :, block, 1] = np.where(inside, cy - safe[:, 1:2], 0.0)
            mask[i, :, block] = inside
            col += r2

    return AlignmentPlan(
        index=index.reshape(m * hw, k),
        delta=delta.reshape(m * hw, k, 2),
        mask=mask.reshape(m * hw, k),
        shape=(m, height, width),
    )
