"""
Export helpers - raw anomaly maps (PFM), colour overlays, feature CSVs and reports
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from matplotlib import colormaps
from PIL import Image

from utils.errors import IoFailure, ShapeMismatch

OVERLAY_ALPHA = 0.5
FEATURE_KEYS = ["sample", "view", "level", "row", "col"]


# ─────────────────────────────────────────────────────────────────────────────
# Portable float map
# ─────────────────────────────────────────────────────────────────────────────

def write_pfm(path: str | Path, array: np.ndarray):
    """Single-channel little-endian PFM; rows are stored bottom-up as the format requires."""
    data = np.asarray(array, dtype="<f4")
    if data.ndim != 2:
        raise ShapeMismatch(f"PFM maps are 2-D, got {data.shape}")
    h, w = data.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    try:
        Path(path).write_bytes(header + np.ascontiguousarray(data[::-1]).tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_pfm(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"Pf", b"PF"):
        raise IoFailure(f"{path} is not a PFM file")
    channels = 1 if parts[0] == b"Pf" else 3
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype, count=w * h * channels)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


# ─────────────────────────────────────────────────────────────────────────────
# Overlays
# ─────────────────────────────────────────────────────────────────────────────

def normalize_map(anomaly_map: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(np.min(anomaly_map)), float(np.max(anomaly_map))
    if hi - lo <= 0:
        return np.zeros_like(anomaly_map, dtype=np.float64)
    return (np.asarray(anomaly_map, dtype=np.float64) - lo) / (hi - lo)


def overlay(anomaly_map: np.ndarray, image: np.ndarray, cmap: str = "jet") -> np.ndarray:
    """
    Blend a colour-mapped anomaly map over an image.

    Args:
        anomaly_map: (H, W) scores
        image: (3, H, W) or (H, W, 3) floats in [0, 1]

    Returns:
        (H, W, 3) uint8 overlay
    """
    if image.ndim == 3 and image.shape[0] == 3:
        image = image.transpose(1, 2, 0)
    if image.shape[:2] != anomaly_map.shape:
        raise ShapeMismatch(f"map {anomaly_map.shape} vs image {image.shape[:2]}")
    heat = colormaps[cmap](normalize_map(anomaly_map))[..., :3]
    blended = (1 - OVERLAY_ALPHA) * np.asarray(image, dtype=np.float64) + OVERLAY_ALPHA * heat
    return np.clip(np.rint(blended * 255), 0, 255).astype(np.uint8)


def export_anomaly_map(anomaly_map: np.ndarray, image: np.ndarray, out_path: str | Path,
                       cmap: str = "jet") -> Tuple[Path, Path]:
    """
    Write `<out_path>.pfm` (raw float map) and `<out_path>.png` (overlay).

    Returns:
        (pfm path, png path)
    """
    base = Path(out_path)
    base = base.with_suffix("") if base.suffix in (".png", ".pfm") else base
    pfm_path, png_path = base.with_suffix(".pfm"), base.with_suffix(".png")
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {base.parent}: {e}") from e
    write_pfm(pfm_path, anomaly_map)
    try:
        Image.fromarray(overlay(anomaly_map, image, cmap)).save(png_path, format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write {png_path}: {e}") from e
    return pfm_path, png_path


# ─────────────────────────────────────────────────────────────────────────────
# Feature CSV
# ─────────────────────────────────────────────────────────────────────────────

def features_frame(features: Mapping[str, Mapping[int, np.ndarray]]) -> pd.DataFrame:
    """
    Flatten {sample_id: {level: (M, C, h, w)}} into one row per position.

    Columns: sample, view, level, row, col, v0 .. v{C-1}; narrower levels
    leave trailing vector columns empty.
    """
    blocks: List[pd.DataFrame] = []
    width = 0
    for sample_id, levels in features.items():
        for level in sorted(levels, reverse=True):
            array = np.asarray(levels[level])
            m, c, h, w = array.shape
            width = max(width, c)
            views, rows, cols = np.meshgrid(np.arange(m), np.arange(h), np.arange(w), indexing="ij")
            vectors = array.transpose(0, 2, 3, 1).reshape(-1, c)
            block = pd.DataFrame(vectors, columns=[f"v{i}" for i in range(c)])
            block.insert(0, "col", cols.ravel())
            block.insert(0, "row", rows.ravel())
            block.insert(0, "level", level)
            block.insert(0, "view", views.ravel())
            block.insert(0, "sample", str(sample_id))
            blocks.append(block)
    columns = FEATURE_KEYS + [f"v{i}" for i in range(width)]
    if not blocks:
        return pd.DataFrame(columns=columns)
    return pd.concat(blocks, ignore_index=True).reindex(columns=columns)


def export_features_csv(features: Mapping[str, Mapping[int, np.ndarray]], out_path: str | Path) -> int:
    """Write the flat feature table; returns the number of rows."""
    frame = features_frame(features)
    try:
        frame.to_csv(out_path, index=False, float_format="%.9g")
    except OSError as e:
        raise IoFailure(f"cannot write {out_path}: {e}") from e
    return len(frame)


def read_features_csv(path: str | Path) -> Dict[str, Dict[int, np.ndarray]]:
    """Inverse of export_features_csv."""
    frame = pd.read_csv(path, dtype={"sample": str})
    vec_cols = [c for c in frame.columns if c.startswith("v") and c[1:].isdigit()]
    out: Dict[str, Dict[int, np.ndarray]] = {}
    for (sample_id, level), group in frame.groupby(["sample", "level"], sort=False):
        values = group[vec_cols].dropna(axis=1, how="all").to_numpy(dtype=np.float32)
        m, h, w = (int(group[k].max()) + 1 for k in ("view", "row", "col"))
        array = np.zeros((m, h, w, values.shape[1]), dtype=np.float32)
        array[group["view"].to_numpy(), group["row"].to_numpy(), group["col"].to_numpy()] = values
        out.setdefault(str(sample_id), {})[int(level)] = array.transpose(0, 3, 1, 2)
    return out


# ─────────────────────────────────────────────────────────────────────────────
# Reports
# ─────────────────────────────────────────────────────────────────────────────

def write_report(report, out_dir: str | Path, stem: str = "report") -> Tuple[Path, Path]:
    """Write an EvalReport as YAML text and CSV."""
    out_dir = Path(out_dir)
    text_path, csv_path = out_dir / f"{stem}.yaml", out_dir / f"{stem}.csv"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path.write_text(report.to_yaml(), encoding="utf-8")
        report.to_frame().to_csv(csv_path, index=False)
    except OSError as e:
        raise IoFailure(f"cannot write report in {out_dir}: {e}") from e
    return text_path, csv_path


def comparison_table(axis: str, values: Iterable, reports: Iterable) -> pd.DataFrame:
    """One row per swept value with the three AUROCs and their change against the first row."""
    rows = []
    for value, report in zip(values, reports):
        row = {axis: value if not isinstance(value, (list, tuple)) else "+".join(map(str, value))}
        for name in ("p_auroc", "v_auroc", "s_auroc"):
            row[name] = report.metric(name)
        rows.append(row)
    frame = pd.DataFrame(rows)
    for name in ("p_auroc", "v_auroc", "s_auroc"):
        base = frame[name].iloc[0] if len(frame) else None
        frame[f"delta_{name}"] = [
            None if v is None or base is None or pd.isna(v) or pd.isna(base) else round(float(v) - float(base), 6)
            for v in frame[name]
        ]
    return frame


def write_comparison(frame: pd.DataFrame, out_dir: str | Path, stem: str) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path, text_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(csv_path, index=False)
        text_path.write_text(frame.to_string(index=False, na_rep="n/a") + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write comparison in {out_dir}: {e}") from e
    return csv_path, text_path
