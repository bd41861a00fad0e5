"""
Inference pipeline - DDIM-inversion feature extraction, bank building and detection
"""

from __future__ import annotations

import hashlib
from typing import Dict, List, Optional

import numpy as np
import torch

from core.checkpoint import LoadedCheckpoint
from core.memory_bank import MemoryBank, build_bank, flatten_positions, verify_search
from core.scoring import AnomalyScores, score_sample
from data.dataset import DatasetHandle, MultiViewSample
from diffusion.ddim import ddim_invert
from diffusion.latent import SpaceToDepthCodec, encode_latent
from geometry.homography import Homography, ViewPair, homography_key
from network.denoiser import GeometryContext
from utils.async_processor import WorkerPool
from utils.cache import FeatureCache, cache_key
from utils.config import RunConfig
from utils.logger import NullLogger, RunLogger

Features = Dict[int, np.ndarray]            # level -> (M, C, h, w) float32


class FeatureExtractor:
    """Runs DDIM inversion on one sample and returns every decoder level's features."""

    def __init__(self, checkpoint: LoadedCheckpoint, cfg: RunConfig,
                 homographies: Dict[ViewPair, Homography],
                 cache: Optional[FeatureCache] = None):
        self.checkpoint = checkpoint
        self.cfg = cfg
        self.model = checkpoint.model
        self.model.set_align(cfg.align)
        self.model.eval()
        self.codec = SpaceToDepthCodec(checkpoint.model_config.latent_factor)
        self.context = GeometryContext.shared(self.model.graph, homographies, 1,
                                              1.0 / checkpoint.model_config.latent_factor)
        self.cache = cache
        self._geometry_key = homography_key(homographies)

    def _key(self, sample: MultiViewSample) -> str:
        digest = hashlib.sha1(np.ascontiguousarray(sample.views).tobytes()).hexdigest()
        d = self.cfg.diffusion
        return cache_key("features", self.checkpoint.content_hash, digest, self._geometry_key,
                         self.cfg.align.radius, self.cfg.align.include_self,
                         d.inversion_steps, d.t_extract)

    def _compute(self, sample: MultiViewSample) -> Dict[str, np.ndarray]:
        z0 = encode_latent(torch.from_numpy(np.ascontiguousarray(sample.views)), self.codec)
        result = ddim_invert(z0, self.cfg.diffusion.inversion_steps, self.checkpoint.schedule,
                             self.model, self.context, self.cfg.diffusion.t_extract)
        return {f"level_{lvl}": f.detach().cpu().numpy().astype(np.float32)
                for lvl, f in result.features.items()}

    def extract(self, sample: MultiViewSample) -> Features:
        if self.cache is not None:
            arrays = self.cache.get_or_set(self._key(sample), self._compute, sample)
        else:
            arrays = self._compute(sample)
        return {int(name.split("_")[1]): arrays[name] for name in sorted(arrays)}

    def extract_split(self, dataset: DatasetHandle, split: str, workers: int = 1) -> List[Features]:
        samples = list(dataset.iter_split(split))
        with WorkerPool(workers) as pool:
            return pool.map_ordered(self.extract, samples)


def bank_metadata(checkpoint: LoadedCheckpoint, cfg: RunConfig) -> Dict[str, object]:
    return {
        "checkpoint_hash": checkpoint.content_hash,
        "levels": list(cfg.score.levels),
        "radius": cfg.align.radius,
        "include_self": cfg.align.include_self,
        "inversion_steps": cfg.diffusion.inversion_steps,
        "t_extract": cfg.diffusion.t_extract,
    }


def bank_from_features(features: List[Features], checkpoint: LoadedCheckpoint,
                       cfg: RunConfig) -> MemoryBank:
    per_level = {level: [flatten_positions(f[level]) for f in features]
                 for level in cfg.score.levels if features and level in features[0]}
    return build_bank(per_level, cfg.score, bank_metadata(checkpoint, cfg))


def build_memory_bank(dataset: DatasetHandle, extractor: FeatureExtractor, cfg: RunConfig,
                      logger: Optional[RunLogger] = None) -> MemoryBank:
    logger = logger or NullLogger()
    logger.start_stage("build_bank", {"levels": cfg.score.levels, "samples": dataset.count("train")})
    features = extractor.extract_split(dataset, "train", cfg.runtime.workers)
    bank = bank_from_features(features, extractor.checkpoint, cfg)
    logger.end_stage({level: bank.size(level) for level in bank.level_ids})
    return bank


class VsadDetector:
    """sample -> AnomalyScores with a fixed extractor, bank and score settings."""

    def __init__(self, extractor: FeatureExtractor, bank: MemoryBank, cfg: RunConfig):
        self.extractor = extractor
        self.bank = bank
        self.cfg = cfg
        self._verified = False

    def _verify(self, features: Features):
        # one-off check of the chunked search against the exhaustive scan
        probe = {lvl: flatten_positions(features[lvl])[:64] for lvl in self.cfg.score.levels}
        verify_search(self.bank, probe, self.cfg.score.neighbor_count)
        self._verified = True

    def score_features(self, features: Features, image_size) -> AnomalyScores:
        if not self._verified:
            self._verify(features)
        return score_sample(features, self.bank, self.cfg.score, image_size)

    def __call__(self, sample: MultiViewSample) -> AnomalyScores:
        return self.score_features(self.extractor.extract(sample), sample.image_size)
