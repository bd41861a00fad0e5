"""
Synthetic multi-view scenes - planar textured objects seen by a fixed camera rig

Each view m renders the canonical texture through a pose homography P_m
(canonical -> view pixels), so H_{i->j} = P_j . P_i^-1 holds exactly.
Defects live on the canonical plane and therefore appear consistently in
every view that sees them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from data.dataset import (CALIBRATION_NAME, MultiViewSample, new_manifest, quantize,
                          save_sample, write_manifest)
from geometry.calibration import save_calibration
from geometry.homography import Homography, ViewPair, make_homography, pairwise_from_poses
from geometry.view_graph import ViewGraph
from utils.async_processor import WorkerPool
from utils.config import DataConfig, DefectConfig, DefectType, SceneConfig
from utils.errors import DefectOutOfBounds, IoFailure

# RNG stream tags, mixed with the scene seed
RIG_STREAM = 1
TEXTURE_STREAM = 2
SAMPLE_STREAM = 3
DEFECT_STREAM = 4

MAX_PLACEMENTS = 10
SCRATCH_WIDTH = 1.5
MASK_THRESHOLD = 0.5


# ─────────────────────────────────────────────────────────────────────────────
# Camera rig
# ─────────────────────────────────────────────────────────────────────────────

def _pose(size: int, angle: float, shift: Tuple[float, float], scale: float,
          tilt: Tuple[float, float]) -> np.ndarray:
    """Rotation/scale/tilt about the image centre followed by a shift."""
    c = (size - 1) / 2.0
    to_origin = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, c + shift[0]], [0, 1, c + shift[1]], [0, 0, 1]], dtype=np.float64)
    cos, sin = math.cos(angle), math.sin(angle)
    core = np.array([
        [scale * cos, -scale * sin, 0.0],
        [scale * sin, scale * cos, 0.0],
        [tilt[0], tilt[1], 1.0],
    ])
    return back @ core @ to_origin


def rig_homographies(cfg: SceneConfig) -> Tuple[List[Homography], Dict[ViewPair, Homography]]:
    """
    Draw the per-view poses of the rig and the exact pairwise homographies.

    Returns:
        (poses P_m mapping canonical -> view m, {(i, j): H_{i->j}})
    """
    rng = np.random.default_rng([cfg.rng_seed, RIG_STREAM])
    cam = cfg.camera
    poses = []
    for m in range(cfg.num_views):
        angle = math.radians(rng.uniform(-cam.rotation_deg, cam.rotation_deg))
        shift = tuple(rng.uniform(-cam.translation_px, cam.translation_px, size=2))
        scale = 1.0 + rng.uniform(-cam.scale, cam.scale)
        tilt = tuple(rng.uniform(-cam.tilt, cam.tilt, size=2))
        poses.append(make_homography(_pose(cfg.image_size, angle, shift, scale, tilt), m, m))
    return poses, pairwise_from_poses(poses)


# ─────────────────────────────────────────────────────────────────────────────
# Texture
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class Texture:
    """Smooth RGB function on the canonical plane: sum of cubic-spline value-noise octaves."""

    size: int
    grids: List[np.ndarray]             # per octave (3, n+1, n+1)
    cells: List[int]
    weights: List[float]

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Evaluate at canonical coordinates (x=u, y=v); returns (3, *u.shape)."""
        out = np.zeros((3,) + u.shape, dtype=np.float64)
        total = sum(self.weights)
        for grid, n, w in zip(self.grids, self.cells, self.weights):
            coords = np.stack([v * n / self.size, u * n / self.size])
            for c in range(3):
                out[c] += w * ndimage.map_coordinates(grid[c], coords, order=3, mode="mirror")
        return np.clip(out / total, 0.0, 1.0)


def make_texture(cfg: SceneConfig, sample_index: Optional[int] = None) -> Texture:
    """Shared base pattern of the dataset, plus per-sample jitter when an index is given."""
    tex = cfg.texture
    base_rng = np.random.default_rng([cfg.rng_seed, TEXTURE_STREAM, tex.palette_seed])
    palette = base_rng.uniform(0.2, 0.8, size=(3, 1, 1))
    grids, cells, weights = [], [], []
    for octave in range(tex.octaves):
        n = tex.base_cells * 2 ** octave
        grids.append(palette + base_rng.uniform(-0.2, 0.2, size=(3, n + 1, n + 1)))
        cells.append(n)
        weights.append(0.5 ** octave)

    if sample_index is not None and tex.jitter > 0:
        rng = np.random.default_rng([cfg.rng_seed, SAMPLE_STREAM, sample_index])
        grids[0] = grids[0] + rng.uniform(-tex.jitter, tex.jitter, size=grids[0].shape)
    return Texture(size=cfg.image_size, grids=grids, cells=cells, weights=weights)


# ─────────────────────────────────────────────────────────────────────────────
# Defects
# ─────────────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Defect:
    kind: DefectType
    center: Tuple[float, float]         # canonical (x, y)
    size: float
    contrast: float
    angle: float = 0.0
    aspect: float = 1.0
    color: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def extent(self) -> float:
        """Radius of a disc that contains the whole defect."""
        if self.kind == DefectType.SCRATCH:
            return self.size + SCRATCH_WIDTH
        return self.size / 2.0 * max(self.aspect, 1.0 / self.aspect) * math.sqrt(2) + 1.0

    def coverage(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Soft coverage in [0, 1] with a one-pixel ramp at the boundary."""
        du, dv = u - self.center[0], v - self.center[1]
        cos, sin = math.cos(self.angle), math.sin(self.angle)
        a = cos * du + sin * dv
        b = -sin * du + cos * dv
        half = self.size / 2.0
        if self.kind == DefectType.BLOB:
            ra, rb = half * self.aspect, half / self.aspect
            dist = (np.sqrt((a / ra) ** 2 + (b / rb) ** 2) - 1.0) * min(ra, rb)
        elif self.kind == DefectType.SCRATCH:
            along = np.clip(a, -self.size, self.size)
            dist = np.hypot(a - along, b) - SCRATCH_WIDTH / 2.0
        else:
            dist = np.maximum(np.abs(a) - half * self.aspect, np.abs(b) - half / self.aspect)
        return np.clip(0.5 - dist, 0.0, 1.0)

    def apply(self, rgb: np.ndarray, cov: np.ndarray) -> np.ndarray:
        if self.kind == DefectType.MISSING:
            fill = np.asarray(self.color).reshape(3, *([1] * cov.ndim))
            return (1.0 - cov) * rgb + cov * fill
        return np.clip(rgb + self.contrast * cov, 0.0, 1.0)


def draw_defect(cfg: DefectConfig, size: int, rng: np.random.Generator) -> Optional[Defect]:
    """Sample defect parameters; None when the size range is empty."""
    lo, hi = cfg.size_range
    if hi <= 0 or not cfg.types:
        return None
    kind = DefectType(cfg.types[int(rng.integers(len(cfg.types)))])
    defect = Defect(
        kind=kind,
        center=(0.0, 0.0),
        size=float(rng.uniform(lo, hi)),
        contrast=float(rng.uniform(*cfg.contrast_range) * rng.choice([-1.0, 1.0])),
        angle=float(rng.uniform(0, math.pi)),
        aspect=float(rng.uniform(0.7, 1.4)),
        color=tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)),
    )
    # centre drawn where the whole defect fits; oversized defects fall back to anywhere
    lo_c, hi_c = defect.extent, size - 1 - defect.extent
    if hi_c < lo_c:
        lo_c, hi_c = 0.0, size - 1.0
    center = rng.uniform(lo_c, hi_c, size=2)
    return replace(defect, center=(float(center[0]), float(center[1])))


# ─────────────────────────────────────────────────────────────────────────────
# Scenes
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class SyntheticScene:
    """A rendered sample plus what is needed to re-render it with a defect."""

    sample: MultiViewSample
    homographies: Dict[ViewPair, Homography]
    poses: List[Homography]
    texture: Texture
    defects: List[Defect] = field(default_factory=list)


def _view_coords(pose: Homography, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Canonical coordinates P_m^-1 p for every pixel p of view m."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    inv = np.linalg.inv(pose.h)
    w = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    u = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / w
    v = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / w
    return u, v


def render(poses: Sequence[Homography], texture: Texture, size: int,
           defects: Sequence[Defect] = ()) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Render every view (and masks when defects are given); views are quantized to 8 bits."""
    views, masks = [], []
    for pose in poses:
        u, v = _view_coords(pose, size)
        rgb = texture(u, v)
        mask = np.zeros((size, size), dtype=bool)
        for defect in defects:
            cov = defect.coverage(u, v)
            rgb = defect.apply(rgb, cov)
            mask |= cov >= MASK_THRESHOLD
        views.append(rgb)
        masks.append(mask)
    views = quantize(np.stack(views)).astype(np.float32)
    return views, (np.stack(masks) if defects else None)


def generate_scene(cfg: SceneConfig, sample_index: int,
                   rig: Optional[Tuple[List[Homography], Dict[ViewPair, Homography]]] = None) -> SyntheticScene:
    """
    Render one normal multi-view sample; a pure function of (cfg, sample_index).

    Args:
        cfg: scene settings
        sample_index: index that seeds the per-sample texture jitter
        rig: precomputed rig_homographies(cfg), to skip redrawing it

    Returns:
        SyntheticScene with the sample and its exact pairwise homographies
    """
    poses, homographies = rig or rig_homographies(cfg)
    texture = make_texture(cfg, sample_index)
    views, _ = render(poses, texture, cfg.image_size)
    sample = MultiViewSample(views=views, sample_id=f"{sample_index:05d}")
    return SyntheticScene(sample=sample, homographies=homographies, poses=poses, texture=texture)


def inject_defect(scene: SyntheticScene, cfg: SceneConfig,
                  rng: Optional[np.random.Generator] = None,
                  defect: Optional[Defect] = None) -> SyntheticScene:
    """
    Draw a defect on the canonical plane and re-render every view with it.

    Placements whose defect is not fully inside the canonical image or not
    visible in any view are redrawn, up to 10 times.
    """
    if scene.sample.sample_label:
        raise ValueError("inject_defect expects a normal sample")
    rng = rng or np.random.default_rng([cfg.rng_seed, DEFECT_STREAM])
    size = cfg.image_size

    for _ in range(MAX_PLACEMENTS):
        candidate = defect or draw_defect(cfg.defect, size, rng)
        if candidate is None:
            return scene
        cx, cy = candidate.center
        e = candidate.extent
        inside = e <= cx <= size - 1 - e and e <= cy <= size - 1 - e
        if inside:
            views, masks = render(scene.poses, scene.texture, size, [candidate])
            if masks.any():
                sample = MultiViewSample.from_masks(views, masks, scene.sample.sample_id)
                return replace(scene, sample=sample, defects=[candidate])
        if defect is not None:
            break
    raise DefectOutOfBounds(
        f"no valid defect placement for sample {scene.sample.sample_id} after {MAX_PLACEMENTS} tries")


def visibility_coverage(poses: Sequence[Homography], size: int, min_views: int = 2) -> float:
    """Fraction of canonical pixels that land inside at least `min_views` views."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    seen = np.zeros(xs.size, dtype=np.int64)
    for pose in poses:
        proj = pose.h @ pts
        x, y = proj[0] / proj[2], proj[1] / proj[2]
        seen += (x >= 0) & (x <= size - 1) & (y >= 0) & (y <= size - 1)
    return float(np.mean(seen >= min_views))


def defect_area(defect: Defect, size: int) -> int:
    """Canonical-plane pixel count covered at the mask threshold."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return int((defect.coverage(xs, ys) >= MASK_THRESHOLD).sum())


# ─────────────────────────────────────────────────────────────────────────────
# Dataset generation
# ─────────────────────────────────────────────────────────────────────────────

def _build_sample(cfg: SceneConfig, rig, index: int, defective: bool) -> MultiViewSample:
    scene = generate_scene(cfg, index, rig)
    if defective:
        scene = inject_defect(scene, cfg, np.random.default_rng([cfg.rng_seed, DEFECT_STREAM, index]))
    return scene.sample


def generate_dataset(cfg: SceneConfig, counts: DataConfig, out_path: str | Path,
                     graph: ViewGraph, workers: int = 1,
                     config_echo: Optional[dict] = None) -> Path:
    """
    Write a full dataset: train (normal only) then test (normal, then defective).

    Sample ids are the zero-padded global sample index. The tree is a pure
    function of the config.
    """
    root = Path(out_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {root}: {e}") from e

    rig = rig_homographies(cfg)
    plan: List[Tuple[str, int, bool]] = []
    index = 0
    for split, n, defective in (("train", counts.train_normal, False),
                                ("test", counts.test_normal, False),
                                ("test", counts.test_defective, True)):
        for _ in range(n):
            plan.append((split, index, defective))
            index += 1

    manifest = new_manifest(cfg.num_views, cfg.image_size, counts.category, cfg.rng_seed,
                            graph, config_echo or {"scene": cfg.model_dump(mode="json")})

    def build(item: Tuple[str, int, bool]) -> Tuple[str, MultiViewSample]:
        split, idx, defective = item
        sample = _build_sample(cfg, rig, idx, defective)
        save_sample(sample, root / split / sample.sample_id)
        return split, sample

    with WorkerPool(workers) as pool:
        built = pool.map_ordered(build, plan)

    for split, sample in built:
        entry = {"id": sample.sample_id, "label": bool(sample.sample_label)}
        if split == "test":
            entry["view_labels"] = [bool(v) for v in sample.view_labels]
        manifest["samples"][split].append(entry)
    manifest["counts"] = {
        "train_normal": counts.train_normal,
        "test_normal": counts.test_normal,
        "test_defective": counts.test_defective,
    }

    save_calibration(root / CALIBRATION_NAME, rig[1],
                     header=f"synthetic rig, seed {cfg.rng_seed}, {cfg.num_views} views")
    write_manifest(root, manifest)
    return root
