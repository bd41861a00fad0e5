"""
Training loop for the view-aligned denoiser: L_total = L_d + lambda * L_r
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch

from core.checkpoint import save_checkpoint
from data.dataset import DatasetHandle
from diffusion.latent import SpaceToDepthCodec
from diffusion.schedule import NoiseSchedule, make_schedule, mix
from network.denoiser import GeometryContext, ViewAlignDenoiser
from network.frm import refinement_loss, total_loss
from utils.config import RunConfig
from utils.errors import NonFiniteInput, NonFiniteLoss, ShapeMismatch
from utils.logger import NullLogger, RunLogger

LOSS_COLUMNS = ["epoch", "step", "l_d", "l_r", "l_total"]


def denoising_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    if eps.shape != eps_hat.shape:
        raise ShapeMismatch(f"eps {tuple(eps.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    return torch.mean((eps - eps_hat) ** 2)


def build_model(cfg: RunConfig, num_views: int) -> ViewAlignDenoiser:
    """Seeded construction so two runs with the same seed start from the same weights."""
    torch.manual_seed(cfg.train.rng_seed)
    return ViewAlignDenoiser(cfg.model, num_views, cfg.align)


def stack_latents(dataset: DatasetHandle, split: str, codec: SpaceToDepthCodec) -> torch.Tensor:
    """(N, M, C_z, h, w) float32 latents of a whole split."""
    views = [torch.from_numpy(sample.views) for sample in dataset.iter_split(split)]
    if not views:
        raise ShapeMismatch(f"split '{split}' is empty")
    return codec.encode(torch.stack(views))


@dataclass
class EpochReport:
    epoch: int
    l_d: float
    l_r: float
    l_total: float
    steps: int


@dataclass
class TrainResult:
    checkpoint_path: Path
    content_hash: str
    epochs: List[EpochReport] = field(default_factory=list)
    history: Optional[pd.DataFrame] = None


def _append_losses(path: Path, rows: List[Dict[str, float]]):
    frame = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)


def train(dataset: DatasetHandle, cfg: RunConfig, out_dir: str | Path,
          model: Optional[ViewAlignDenoiser] = None,
          logger: Optional[RunLogger] = None,
          latents: Optional[torch.Tensor] = None) -> TrainResult:
    """
    Train on the normal train split and write checkpoint.sqlite + losses.csv.

    Every step draws a batch permutation, t ~ U{1..T} and eps ~ N(0, I) from a
    generator seeded with train.rng_seed, so a run is reproducible in
    deterministic mode.

    Args:
        dataset: dataset handle; only its train split is read
        cfg: resolved run configuration
        out_dir: output directory
        model: model to continue training, built from cfg when omitted
        logger: run logger
        latents: precomputed train latents (N, M, C_z, h, w)

    Returns:
        TrainResult with per-epoch mean losses and the checkpoint hash
    """
    logger = logger or NullLogger()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_path = out_dir / "losses.csv"
    if loss_path.exists():
        loss_path.unlink()

    codec = SpaceToDepthCodec(cfg.model.latent_factor)
    z_all = latents if latents is not None else stack_latents(dataset, "train", codec)
    n = z_all.shape[0]
    num_views = z_all.shape[1]
    model = model or build_model(cfg, num_views)
    model.train()

    schedule: NoiseSchedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.schedule)
    generator = torch.Generator().manual_seed(cfg.train.rng_seed)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=cfg.train.learning_rate,
                                  weight_decay=cfg.train.weight_decay)
    lambda_ = cfg.train.lambda_
    context = GeometryContext.shared(dataset.graph, dataset.homographies, 1,
                                     1.0 / cfg.model.latent_factor)

    logger.start_stage("train", {"samples": n, "views": num_views, "epochs": cfg.train.epochs,
                                 "lambda": lambda_, "schedule": schedule.describe()})
    step = 0
    epochs: List[EpochReport] = []
    for epoch in range(1, cfg.train.epochs + 1):
        order = torch.randperm(n, generator=generator)
        rows: List[Dict[str, float]] = []
        for start in range(0, n, cfg.train.batch_size):
            idx = order[start:start + cfg.train.batch_size]
            z0 = z_all[idx]
            b = z0.shape[0]
            t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
            eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
            z_t = mix(z0, eps, schedule.alpha_bar_tensor(t, z0.dtype))

            eps_hat, features = model(z_t, t, context.subset([0] * b))
            l_d = denoising_loss(eps, eps_hat)
            l_r = refinement_loss(features, dataset.graph)
            try:
                report = total_loss(l_d, l_r, lambda_)
            except NonFiniteInput:
                raise NonFiniteLoss(step, t.tolist(), {"l_d": l_d.detach().item(), "l_r": l_r.detach().item()}) from None

            optimizer.zero_grad(set_to_none=True)
            report.l_total.backward()
            optimizer.step()

            step += 1
            row = {"epoch": epoch, "step": step, **{k: v for k, v in report.to_dict().items() if k != "lambda"}}
            rows.append(row)

        _append_losses(loss_path, rows)
        means = {k: float(np.mean([r[k] for r in rows])) for k in ("l_d", "l_r", "l_total")}
        epochs.append(EpochReport(epoch=epoch, steps=len(rows), **means))
        logger.log_step("epoch", {"epoch": epoch, **means})
        logger.info(f"  epoch {epoch:3d}  L_d={means['l_d']:.5f}  L_r={means['l_r']:.5f}  "
                    f"L_total={means['l_total']:.5f}")
        if not math.isfinite(means["l_total"]):
            raise NonFiniteLoss(step, None, means)

    model.eval()
    checkpoint_path = out_dir / "checkpoint.sqlite"
    digest = save_checkpoint(checkpoint_path, model, cfg.diffusion, cfg.train.rng_seed,
                             extra={"final_epoch_loss": epochs[-1].__dict__ if epochs else {},
                                    "lambda": cfg.train.lambda_})
    logger.end_stage({"checkpoint": str(checkpoint_path), "content_hash": digest})
    history = pd.read_csv(loss_path) if loss_path.exists() else None
    return TrainResult(checkpoint_path=checkpoint_path, content_hash=digest,
                       epochs=epochs, history=history)
