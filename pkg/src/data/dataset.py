"""
Multi-view samples and the on-disk dataset layout

    root/manifest.yaml
    root/calibration.txt
    root/{train|test}/{sample_id}/view_{m}.png
    root/test/{sample_id}/mask_{m}.png        (defective samples only)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import yaml
from PIL import Image

from geometry.calibration import load_calibration
from geometry.homography import Homography, ViewPair
from geometry.view_graph import ViewGraph, build_view_graph
from utils.config import ARTIFACT_VERSION, Topology
from utils.errors import (ContaminatedTrainSplit, IoFailure, ManifestMissing,
                          MaskLabelMismatch, MissingCalibration)

MANIFEST_NAME = "manifest.yaml"
CALIBRATION_NAME = "calibration.txt"
SPLITS = ("train", "test")


# ─────────────────────────────────────────────────────────────────────────────
# Pixel conversion (shared by generator and loader so both see the same floats)
# ─────────────────────────────────────────────────────────────────────────────

def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / np.float32(255.0)


def quantize(images: np.ndarray) -> np.ndarray:
    return from_uint8(to_uint8(images))


# ─────────────────────────────────────────────────────────────────────────────
# Sample
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class MultiViewSample:
    views: np.ndarray                         # (M, 3, H, W) float32 in [0, 1]
    masks: Optional[np.ndarray] = None        # (M, H, W) bool, defective samples only
    view_labels: List[bool] = field(default_factory=list)
    sample_label: bool = False
    sample_id: str = ""

    def __post_init__(self):
        if not self.view_labels:
            self.view_labels = [False] * self.num_views

    @property
    def num_views(self) -> int:
        return int(self.views.shape[0])

    @property
    def image_size(self) -> tuple:
        return tuple(self.views.shape[-2:])

    @classmethod
    def from_masks(cls, views: np.ndarray, masks: Optional[np.ndarray], sample_id: str) -> "MultiViewSample":
        """Derive labels from masks; a mask array with no positive pixel still marks no view."""
        if masks is None:
            return cls(views=views, sample_id=sample_id)
        labels = [bool(m.any()) for m in masks]
        return cls(views=views, masks=masks.astype(bool), view_labels=labels,
                   sample_label=any(labels), sample_id=sample_id)

    def validate(self):
        """Check the label/mask invariants; raises MaskLabelMismatch."""
        if self.views.ndim != 4 or self.views.shape[1] != 3:
            raise MaskLabelMismatch(f"{self.sample_id}: views must be (M, 3, H, W)")
        if len(self.view_labels) != self.num_views:
            raise MaskLabelMismatch(f"{self.sample_id}: {len(self.view_labels)} labels for {self.num_views} views")
        if self.sample_label != any(self.view_labels):
            raise MaskLabelMismatch(f"{self.sample_id}: sample label disagrees with view labels")
        if self.masks is None:
            if self.sample_label:
                raise MaskLabelMismatch(f"{self.sample_id}: defective sample without masks")
            return
        if self.masks.shape != (self.num_views,) + self.image_size:
            raise MaskLabelMismatch(f"{self.sample_id}: mask shape {self.masks.shape} does not match views")
        for m, (mask, label) in enumerate(zip(self.masks, self.view_labels)):
            if bool(mask.any()) != bool(label):
                raise MaskLabelMismatch(f"{self.sample_id}: view {m} label {label} disagrees with its mask")

    def pixel_labels(self) -> np.ndarray:
        """(M, H, W) bool ground truth, all False for normal samples."""
        if self.masks is None:
            return np.zeros((self.num_views,) + self.image_size, dtype=bool)
        return self.masks


# ─────────────────────────────────────────────────────────────────────────────
# Writing
# ─────────────────────────────────────────────────────────────────────────────

def save_sample(sample: MultiViewSample, sample_dir: Path):
    """Write view PNGs and, for defective samples, 0/255 mask PNGs."""
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
        pixels = to_uint8(sample.views)
        for m in range(sample.num_views):
            Image.fromarray(np.ascontiguousarray(pixels[m].transpose(1, 2, 0))).save(
                sample_dir / f"view_{m}.png", format="PNG")
            if sample.masks is not None:
                mask = np.where(sample.masks[m], 255, 0).astype(np.uint8)
                Image.fromarray(mask).save(sample_dir / f"mask_{m}.png", format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write sample {sample_dir}: {e}") from e


def write_manifest(root: Path, manifest: Dict[str, Any]):
    try:
        (root / MANIFEST_NAME).write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write manifest in {root}: {e}") from e


# ─────────────────────────────────────────────────────────────────────────────
# Reading
# ─────────────────────────────────────────────────────────────────────────────

def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def load_sample_dir(sample_dir: Path, num_views: int, sample_id: Optional[str] = None) -> MultiViewSample:
    """Read one sample directory; masks are read when any mask file exists."""
    sample_id = sample_id or sample_dir.name
    views = []
    for m in range(num_views):
        path = sample_dir / f"view_{m}.png"
        if not path.exists():
            raise IoFailure(f"missing view image {path}")
        views.append(from_uint8(_read_png(path, "RGB").transpose(2, 0, 1)))
    views = np.stack(views)

    mask_paths = [sample_dir / f"mask_{m}.png" for m in range(num_views)]
    present = [p.exists() for p in mask_paths]
    if not any(present):
        return MultiViewSample(views=views, sample_id=sample_id)
    if not all(present):
        missing = [p.name for p, ok in zip(mask_paths, present) if not ok]
        raise MaskLabelMismatch(f"{sample_id}: mask files missing: {missing}")
    masks = np.stack([_read_png(p, "L") >= 128 for p in mask_paths])
    return MultiViewSample.from_masks(views, masks, sample_id)


@dataclass
class SampleEntry:
    sample_id: str
    split: str
    label: bool
    view_labels: Optional[List[bool]] = None


class DatasetHandle:
    """Lazy view over a dataset directory; samples are read on iteration."""

    def __init__(self, root: Path, manifest: Dict[str, Any], graph: ViewGraph,
                 homographies: Dict[ViewPair, Homography]):
        self.root = root
        self.manifest = manifest
        self.graph = graph
        self.homographies = homographies
        self.num_views = int(manifest["num_views"])
        self.category = manifest.get("category", root.name)
        self.entries: Dict[str, List[SampleEntry]] = {split: [] for split in SPLITS}
        for split in SPLITS:
            for item in manifest.get("samples", {}).get(split, []) or []:
                self.entries[split].append(SampleEntry(
                    sample_id=str(item["id"]),
                    split=split,
                    label=bool(item.get("label", False)),
                    view_labels=item.get("view_labels"),
                ))

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def count(self, split: str) -> int:
        return len(self.entries[split])

    def sample_ids(self, split: str) -> List[str]:
        return [e.sample_id for e in self.entries[split]]

    def homographies_for(self, sample_id: str) -> Dict[ViewPair, Homography]:
        """All samples of a dataset share one rig calibration."""
        return self.homographies

    def load(self, split: str, index: int) -> MultiViewSample:
        entry = self.entries[split][index]
        sample = load_sample_dir(self.root / split / entry.sample_id, self.num_views, entry.sample_id)
        self._check(entry, sample)
        return sample

    def iter_split(self, split: str) -> Iterator[MultiViewSample]:
        for index in range(self.count(split)):
            yield self.load(split, index)

    def _check(self, entry: SampleEntry, sample: MultiViewSample):
        if entry.split == "train" and sample.masks is not None:
            raise ContaminatedTrainSplit(
                f"train sample {entry.sample_id} has mask files; train must be anomaly-free")
        if entry.label and sample.masks is None:
            raise MaskLabelMismatch(f"{entry.sample_id}: labelled defective but has no masks")
        if sample.sample_label != entry.label:
            raise MaskLabelMismatch(
                f"{entry.sample_id}: manifest label {entry.label} but masks say {sample.sample_label}")
        if entry.view_labels is not None and [bool(v) for v in entry.view_labels] != sample.view_labels:
            raise MaskLabelMismatch(f"{entry.sample_id}: manifest view labels disagree with masks")
        sample.validate()


def load_dataset(path: str | Path, calibration: Optional[str | Path] = None,
                 topology: Topology | str | None = None,
                 neighbors: Optional[List[List[int]]] = None) -> DatasetHandle:
    """
    Open a dataset directory.

    Args:
        path: dataset root holding manifest.yaml
        calibration: calibration file, defaults to root/calibration.txt
        topology: view adjacency, defaults to the manifest's (ring otherwise)
        neighbors: explicit adjacency lists

    Returns:
        DatasetHandle; samples are validated as they are loaded
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestMissing(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ManifestMissing(f"{manifest_path} is not valid YAML: {e}") from e
    if "num_views" not in manifest:
        raise ManifestMissing(f"{manifest_path} does not declare num_views")

    graph_info = manifest.get("view_graph", {})
    graph = build_view_graph(
        int(manifest["num_views"]),
        topology or graph_info.get("topology", Topology.RING.value),
        neighbors if neighbors is not None else graph_info.get("neighbors"),
    )

    calib_path = Path(calibration) if calibration is not None else root / CALIBRATION_NAME
    if not calib_path.exists():
        raise MissingCalibration(f"calibration file not found: {calib_path}")
    homographies = load_calibration(calib_path, graph)
    return DatasetHandle(root, manifest, graph, homographies)


def new_manifest(num_views: int, image_size: int, category: str, seed: int,
                 graph: ViewGraph, config: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "format_version": ARTIFACT_VERSION,
        "category": category,
        "num_views": num_views,
        "image_size": image_size,
        "seed": seed,
        "view_graph": graph.describe(),
        "config": config,
        "counts": {},
        "samples": {"train": [], "test": []},
    }
