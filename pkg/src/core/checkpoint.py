"""
Checkpoint store for mvad - model weights in a self-describing SQLite container
"""

import hashlib
import json
import os
import sqlite3
from contextlib import closing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from diffusion.schedule import NoiseSchedule, make_schedule
from network.denoiser import ViewAlignDenoiser
from utils.config import ARTIFACT_VERSION, AlignConfig, DiffusionConfig, ModelConfig
from utils.errors import CheckpointMismatch, IoFailure, MissingInput

FORMAT = "mvad-checkpoint"

# Fields that change the parameter layout; the rest may differ between runs
ARCHITECTURE_FIELDS = ("in_channels", "latent_factor", "base_channels", "channel_mult",
                       "norm_groups", "attention_dim", "se_reduction")


@dataclass
class LoadedCheckpoint:
    model: ViewAlignDenoiser
    model_config: ModelConfig
    align: AlignConfig
    diffusion: DiffusionConfig
    schedule: NoiseSchedule
    num_views: int
    content_hash: str
    manifest: Dict[str, Any]


def content_hash(tensors: List[Tuple[str, np.ndarray]]) -> str:
    """Git-style blob hash over the names and little-endian payload of every tensor."""
    payload = bytearray()
    for name, array in tensors:
        payload += name.encode("utf-8") + b"\0"
        payload += str(list(array.shape)).encode("ascii") + b"\0"
        payload += array.astype("<f4").tobytes()
    header = f"blob {len(payload)}\0".encode("ascii")
    return hashlib.sha1(header + bytes(payload)).hexdigest()


def _state_arrays(model: torch.nn.Module) -> List[Tuple[str, np.ndarray]]:
    return [(name, value.detach().cpu().to(torch.float32).numpy())
            for name, value in sorted(model.state_dict().items())]


class CheckpointStore:
    """
    Reads and writes one checkpoint file.

    Tables: manifest(key, value JSON) and tensors(name, shape JSON, dtype, data BLOB).
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def _init_tables(self, conn: sqlite3.Connection):
        conn.execute("""
            CREATE TABLE manifest (
                key TEXT PRIMARY KEY,
                value TEXT NOT NULL
            )
        """)
        conn.execute("""
            CREATE TABLE tensors (
                name TEXT PRIMARY KEY,
                shape TEXT NOT NULL,
                dtype TEXT NOT NULL,
                data BLOB NOT NULL
            )
        """)

    def save(self, model: ViewAlignDenoiser, diffusion: DiffusionConfig,
             seed: int, extra: Optional[Dict[str, Any]] = None) -> str:
        """
        Write the model atomically (temp file, then rename).

        Args:
            model: trained denoiser
            diffusion: schedule settings the model was trained with
            seed: training seed
            extra: additional manifest entries (e.g. loss summary)

        Returns:
            content hash of the stored tensors
        """
        arrays = _state_arrays(model)
        digest = content_hash(arrays)
        manifest = {
            "format": FORMAT,
            "version": ARTIFACT_VERSION,
            "model_config": model.config.model_dump(mode="json"),
            "align": model.align.model_dump(mode="json"),
            "diffusion": diffusion.model_dump(mode="json"),
            "num_views": model.num_views,
            "seed": seed,
            "content_hash": digest,
        }
        manifest.update(extra or {})

        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = self.path.with_name(self.path.name + ".tmp")
        if tmp_path.exists():
            tmp_path.unlink()
        try:
            with closing(sqlite3.connect(tmp_path)) as conn:
                self._init_tables(conn)
                conn.executemany(
                    "INSERT INTO manifest (key, value) VALUES (?, ?)",
                    [(key, json.dumps(value, sort_keys=True)) for key, value in sorted(manifest.items())],
                )
                conn.executemany(
                    "INSERT INTO tensors (name, shape, dtype, data) VALUES (?, ?, ?, ?)",
                    [(name, json.dumps(list(array.shape)), "float32<", array.astype("<f4").tobytes())
                     for name, array in arrays],
                )
                conn.commit()
            os.replace(tmp_path, self.path)
        except (OSError, sqlite3.Error) as e:
            if tmp_path.exists():
                tmp_path.unlink()
            raise IoFailure(f"cannot write checkpoint {self.path}: {e}") from e
        return digest

    def read_manifest(self) -> Dict[str, Any]:
        self._require()
        with closing(sqlite3.connect(self.path)) as conn:
            try:
                rows = conn.execute("SELECT key, value FROM manifest").fetchall()
            except sqlite3.DatabaseError as e:
                raise CheckpointMismatch(f"{self.path} is not a checkpoint: {e}") from e
        manifest = {key: json.loads(value) for key, value in rows}
        if manifest.get("format") != FORMAT:
            raise CheckpointMismatch(f"{self.path} is not a {FORMAT} file")
        return manifest

    def read_tensors(self) -> Dict[str, np.ndarray]:
        self._require()
        with closing(sqlite3.connect(self.path)) as conn:
            rows = conn.execute("SELECT name, shape, dtype, data FROM tensors ORDER BY name").fetchall()
        out = {}
        for name, shape, dtype, data in rows:
            if dtype != "float32<":
                raise CheckpointMismatch(f"tensor {name} has unsupported dtype {dtype}")
            out[name] = np.frombuffer(data, dtype="<f4").reshape(json.loads(shape)).astype(np.float32)
        return out

    def load(self, expected: Optional[ModelConfig] = None) -> LoadedCheckpoint:
        """
        Rebuild the model and validate every tensor shape against its config.

        Args:
            expected: when given, its architecture fields must match the stored ones
        """
        manifest = self.read_manifest()
        model_config = ModelConfig.model_validate(manifest["model_config"])
        if expected is not None:
            for name in ARCHITECTURE_FIELDS:
                stored, wanted = getattr(model_config, name), getattr(expected, name)
                if stored != wanted:
                    raise CheckpointMismatch(
                        f"checkpoint {name}={stored} but the run config asks for {wanted}")

        align = AlignConfig.model_validate(manifest["align"])
        diffusion = DiffusionConfig.model_validate(manifest["diffusion"])
        model = ViewAlignDenoiser(model_config, int(manifest["num_views"]), align)

        tensors = self.read_tensors()
        state = model.state_dict()
        missing = sorted(set(state) - set(tensors))
        unexpected = sorted(set(tensors) - set(state))
        if missing or unexpected:
            raise CheckpointMismatch(f"tensor names differ: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if tuple(value.shape) != tuple(tensors[name].shape):
                raise CheckpointMismatch(
                    f"tensor {name}: stored shape {tensors[name].shape} != expected {tuple(value.shape)}")
        model.load_state_dict({name: torch.from_numpy(array) for name, array in tensors.items()})
        model.eval()

        return LoadedCheckpoint(
            model=model,
            model_config=model_config,
            align=align,
            diffusion=diffusion,
            schedule=make_schedule(diffusion.timesteps, diffusion.schedule),
            num_views=int(manifest["num_views"]),
            content_hash=manifest["content_hash"],
            manifest=manifest,
        )

    def _require(self):
        if not self.path.exists():
            raise MissingInput(f"checkpoint not found: {self.path}")


def save_checkpoint(path: str | Path, model: ViewAlignDenoiser, diffusion: DiffusionConfig,
                    seed: int, extra: Optional[Dict[str, Any]] = None) -> str:
    return CheckpointStore(path).save(model, diffusion, seed, extra)


def load_checkpoint(path: str | Path, expected: Optional[ModelConfig] = None) -> LoadedCheckpoint:
    return CheckpointStore(path).load(expected)
