"""
Evaluation Framework for mvad - pixel / view / sample AUROC over a test split
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml
from scipy.stats import rankdata

from core.scoring import AnomalyScores
from data.dataset import DatasetHandle, MultiViewSample
from utils.errors import MetricUnavailableWarning, ShapeMismatch, SingleClass
from utils.logger import NullLogger, RunLogger

Detector = Callable[[MultiViewSample], AnomalyScores]

METRICS = ("p_auroc", "v_auroc", "s_auroc")

POOLING_NOTES = {
    "pixel": "all test pixels pooled across the split",
    "view": "views with an empty mask are negatives, also inside defective samples",
    "sample": "sample score is the max over its view scores",
}


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """
    Mann-Whitney AUROC with midranks: P(score_pos > score_neg) + 0.5 P(equal).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"{scores.size} scores for {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    p_auroc: Optional[float]
    v_auroc: Optional[float]
    s_auroc: Optional[float]
    counts: Dict[str, int] = field(default_factory=dict)
    per_category: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=lambda: dict(POOLING_NOTES))

    def metric(self, name: str) -> Optional[float]:
        return getattr(self, name)

    def to_dict(self) -> Dict[str, Any]:
        def fmt(value: Optional[float]):
            return "n/a" if value is None else round(float(value), 6)

        return {
            "metrics": {name: fmt(self.metric(name)) for name in METRICS},
            "counts": dict(self.counts),
            "per_category": {cat: {k: fmt(v) for k, v in vals.items()}
                             for cat, vals in self.per_category.items()},
            "config": self.config,
            "pooling": self.notes,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for cat, vals in (self.per_category or {"all": {m: self.metric(m) for m in METRICS}}).items():
            row = {"category": cat}
            row.update({m: ("n/a" if vals.get(m) is None else round(float(vals[m]), 6)) for m in METRICS})
            row.update(self.counts)
            rows.append(row)
        return pd.DataFrame(rows)


def _metric_or_na(name: str, scores: np.ndarray, labels: np.ndarray,
                  logger: RunLogger) -> Optional[float]:
    try:
        return auroc(scores, labels)
    except SingleClass as e:
        logger.warning(f"{name} unavailable: {e}", MetricUnavailableWarning)
        return None


def evaluate(dataset: DatasetHandle, detector: Detector, config_echo: Optional[Dict[str, Any]] = None,
             logger: Optional[RunLogger] = None, split: str = "test",
             scores: Optional[List[AnomalyScores]] = None,
             on_sample: Optional[Callable[[MultiViewSample, AnomalyScores], None]] = None) -> EvalReport:
    """
    Score every sample of a split and compute the three AUROC levels.

    Args:
        dataset: dataset handle
        detector: sample -> AnomalyScores
        config_echo: settings recorded in the report (levels, weights, R, lambda, seeds)
        logger: run logger; single-class metrics are reported n/a with a warning
        split: split to evaluate
        scores: precomputed detector outputs, one per sample in split order
        on_sample: hook called with every sample and its scores (map export)

    Returns:
        EvalReport; identical inputs give identical reports
    """
    logger = logger or NullLogger()
    pixel_scores, pixel_labels = [], []
    view_scores, view_labels = [], []
    sample_scores, sample_labels = [], []
    expected_pixels = expected_views = 0

    for index, sample in enumerate(dataset.iter_split(split)):
        result = scores[index] if scores is not None else detector(sample)
        m, (h, w) = sample.num_views, sample.image_size
        if result.pixel_maps.shape != (m, h, w):
            raise ShapeMismatch(
                f"{sample.sample_id}: map shape {result.pixel_maps.shape} != {(m, h, w)}")
        expected_pixels += m * h * w
        expected_views += m
        pixel_scores.append(np.asarray(result.pixel_maps, dtype=np.float64).ravel())
        pixel_labels.append(sample.pixel_labels().ravel())
        view_scores.extend(result.view_scores)
        view_labels.extend(sample.view_labels)
        sample_scores.append(result.sample_score)
        sample_labels.append(sample.sample_label)
        if on_sample is not None:
            on_sample(sample, result)

    pixels = np.concatenate(pixel_scores) if pixel_scores else np.zeros(0)
    labels = np.concatenate(pixel_labels) if pixel_labels else np.zeros(0, dtype=bool)
    if pixels.size != expected_pixels or len(view_scores) != expected_views:
        raise ShapeMismatch(
            f"pooled {pixels.size} pixels / {len(view_scores)} views, "
            f"expected {expected_pixels} / {expected_views}")

    metrics = {
        "p_auroc": _metric_or_na("P-AUROC", pixels, labels, logger),
        "v_auroc": _metric_or_na("V-AUROC", np.asarray(view_scores), np.asarray(view_labels), logger),
        "s_auroc": _metric_or_na("S-AUROC", np.asarray(sample_scores), np.asarray(sample_labels), logger),
    }
    counts = {"pixels": int(pixels.size), "views": len(view_scores), "samples": len(sample_scores),
              "defective_samples": int(np.sum(sample_labels))}
    return EvalReport(
        counts=counts,
        per_category={dataset.category: dict(metrics)},
        config=config_echo or {},
        **metrics,
    )
