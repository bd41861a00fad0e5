"""
Memory Bank for mvad - per-level normal prototypes, coreset selection and bank files
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from utils.config import ScoreConfig
from utils.errors import (BankMismatchWarning, CorruptBankFile, EmptyFeatureSet, IoFailure,
                          LevelMismatch, MvadError)
from utils.logger import NullLogger, RunLogger

MAGIC = b"MVADBANK"
FORMAT_VERSION = 1
DIGEST_SIZE = 32
SEARCH_CHUNK = 4096

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass
class MemoryBank:
    levels: Dict[int, np.ndarray]                    # level -> (N_l, C_l) float32
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def level_ids(self) -> List[int]:
        return list(self.levels)

    def size(self, level: int) -> int:
        return int(self.levels[level].shape[0])

    def dim(self, level: int) -> int:
        return int(self.levels[level].shape[1])

    def equals(self, other: "MemoryBank") -> bool:
        if self.level_ids != other.level_ids or self.metadata != other.metadata:
            return False
        return all(np.array_equal(self.levels[l], other.levels[l]) for l in self.level_ids)


def flatten_positions(features: ArrayLike) -> np.ndarray:
    """(M, C, h, w) -> (M*h*w, C), rows ordered view, then row, then column."""
    array = features.detach().cpu().numpy() if isinstance(features, torch.Tensor) else np.asarray(features)
    if array.ndim != 4:
        raise LevelMismatch(f"expected (M, C, h, w) features, got shape {array.shape}")
    m, c, h, w = array.shape
    return np.ascontiguousarray(array.transpose(0, 2, 3, 1).reshape(m * h * w, c))


# ─────────────────────────────────────────────────────────────────────────────
# Coreset
# ─────────────────────────────────────────────────────────────────────────────

def coreset_target(count: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * count - 1e-9))


def greedy_coreset(vectors: ArrayLike, target: int, start_index: int = 0) -> List[int]:
    """
    Greedy farthest-point selection in float64.

    Starts at `start_index`, then repeatedly adds the vector farthest from the
    selected set (lowest index on ties). Stops early once every vector
    coincides with a selected one.
    """
    x = torch.as_tensor(np.asarray(vectors), dtype=torch.float64)
    total = x.shape[0]
    if total == 0:
        raise EmptyFeatureSet("cannot select a coreset from no vectors")
    target = min(target, total)
    selected = [int(start_index) % total]
    distances = torch.linalg.norm(x - x[selected[0]], dim=1)
    while len(selected) < target:
        next_index = int(torch.argmax(distances))
        if float(distances[next_index]) == 0.0:
            break
        selected.append(next_index)
        distances = torch.minimum(distances, torch.linalg.norm(x - x[next_index], dim=1))
    return selected


def build_bank(normal_features: Mapping[int, Sequence[ArrayLike] | ArrayLike], cfg: ScoreConfig,
               metadata: Optional[Dict[str, Any]] = None) -> MemoryBank:
    """
    Store normal feature vectors per level, optionally coreset-subsampled.

    Args:
        normal_features: level -> (N, C) vectors or a list of such blocks
        cfg: score settings (levels, coreset_fraction, coreset_seed)
        metadata: provenance stored with the bank (checkpoint hash, extraction)

    Returns:
        MemoryBank holding exactly cfg.levels
    """
    levels: Dict[int, np.ndarray] = {}
    for level in cfg.levels:
        if level not in normal_features:
            raise EmptyFeatureSet(f"no features for level {level}")
        blocks = normal_features[level]
        if isinstance(blocks, (np.ndarray, torch.Tensor)):
            blocks = [blocks]
        arrays = [b.detach().cpu().numpy() if isinstance(b, torch.Tensor) else np.asarray(b) for b in blocks]
        arrays = [a for a in arrays if a.size]
        if not arrays:
            raise EmptyFeatureSet(f"level {level} has no feature vectors")
        dims = {a.shape[-1] for a in arrays}
        if len(dims) != 1:
            raise LevelMismatch(f"level {level} mixes feature widths {sorted(dims)}")
        vectors = np.concatenate([a.reshape(-1, a.shape[-1]) for a in arrays]).astype(np.float32)

        if cfg.coreset_fraction < 1.0:
            target = coreset_target(len(vectors), cfg.coreset_fraction)
            start = int(np.random.default_rng([cfg.coreset_seed, level]).integers(len(vectors)))
            vectors = vectors[greedy_coreset(vectors, target, start)]
        levels[level] = np.ascontiguousarray(vectors)

    meta = dict(metadata or {})
    meta.setdefault("coreset_fraction", cfg.coreset_fraction)
    meta.setdefault("coreset_seed", cfg.coreset_seed)
    return MemoryBank(levels=levels, metadata=meta)


# ─────────────────────────────────────────────────────────────────────────────
# Nearest-neighbour search
# ─────────────────────────────────────────────────────────────────────────────

def nearest_distances(queries: ArrayLike, prototypes: ArrayLike, k: int = 1,
                      chunk: int = SEARCH_CHUNK) -> torch.Tensor:
    """
    Exact Euclidean distances to the k nearest prototypes, float64, chunked over queries.

    Returns:
        (Q, k) ascending distances
    """
    q = torch.as_tensor(np.asarray(queries), dtype=torch.float64)
    p = torch.as_tensor(np.asarray(prototypes), dtype=torch.float64)
    if q.shape[-1] != p.shape[-1]:
        raise LevelMismatch(f"query width {q.shape[-1]} != prototype width {p.shape[-1]}")
    k = min(k, p.shape[0])
    out = []
    for start in range(0, q.shape[0], chunk):
        d = torch.cdist(q[start:start + chunk], p, compute_mode="donot_use_mm_for_euclid_dist")
        out.append(torch.topk(d, k, dim=1, largest=False).values)
    return torch.cat(out) if out else torch.zeros(0, k, dtype=torch.float64)


def exhaustive_distances(queries: ArrayLike, prototypes: ArrayLike, k: int = 1) -> torch.Tensor:
    """Brute-force reference: explicit difference vectors, one query at a time."""
    q = torch.as_tensor(np.asarray(queries), dtype=torch.float64)
    p = torch.as_tensor(np.asarray(prototypes), dtype=torch.float64)
    k = min(k, p.shape[0])
    rows = [torch.sort(torch.sqrt(((p - row) ** 2).sum(-1))).values[:k] for row in q]
    return torch.stack(rows) if rows else torch.zeros(0, k, dtype=torch.float64)


def verify_search(bank: MemoryBank, queries: Mapping[int, ArrayLike], k: int = 1,
                  tol: float = 1e-6) -> float:
    """Check chunked search against the exhaustive scan; returns the worst deviation."""
    worst = 0.0
    for level, q in queries.items():
        fast = nearest_distances(q, bank.levels[level], k)
        slow = exhaustive_distances(q, bank.levels[level], k)
        worst = max(worst, float((fast - slow).abs().max()) if fast.numel() else 0.0)
    if worst > tol:
        raise MvadError(f"nearest-neighbour search deviates from the exhaustive scan by {worst:.3g}")
    return worst


# ─────────────────────────────────────────────────────────────────────────────
# Bank files
# ─────────────────────────────────────────────────────────────────────────────

def save_bank(bank: MemoryBank, path: str | Path):
    """
    Layout (little-endian):
        magic[8] version:u32 meta_len:u32 meta[meta_len] n_levels:u32
        n_levels x (level:u32 count:u32 dim:u32)
        float32 payload, level after level
        sha256[32] over everything before it
    """
    meta = json.dumps(bank.metadata, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<II", FORMAT_VERSION, len(meta))
    body += meta
    body += struct.pack("<I", len(bank.levels))
    for level, vectors in bank.levels.items():
        body += struct.pack("<III", level, vectors.shape[0], vectors.shape[1])
    for vectors in bank.levels.values():
        body += np.ascontiguousarray(vectors, dtype="<f4").tobytes()
    body += hashlib.sha256(bytes(body)).digest()

    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path.write_bytes(bytes(body))
        tmp_path.replace(path)
    except OSError as e:
        raise IoFailure(f"cannot write bank {path}: {e}") from e


def load_bank(path: str | Path, expected_hash: Optional[str] = None,
              logger: Optional[RunLogger] = None) -> MemoryBank:
    """
    Read and verify a bank file.

    A checkpoint hash different from `expected_hash` only warns
    (BankMismatchWarning); structural problems raise CorruptBankFile.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read bank {path}: {e}") from e

    header = len(MAGIC) + 8
    if len(data) < header + 4 + DIGEST_SIZE:
        raise CorruptBankFile(f"{path}: file too short ({len(data)} bytes)")
    if data[:len(MAGIC)] != MAGIC:
        raise CorruptBankFile(f"{path}: bad magic")
    version, meta_len = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CorruptBankFile(f"{path}: unsupported version {version}")
    if hashlib.sha256(data[:-DIGEST_SIZE]).digest() != data[-DIGEST_SIZE:]:
        raise CorruptBankFile(f"{path}: checksum mismatch")

    offset = header
    if offset + meta_len + 4 > len(data) - DIGEST_SIZE:
        raise CorruptBankFile(f"{path}: metadata length out of range")
    try:
        metadata = json.loads(data[offset:offset + meta_len].decode("utf-8"))
    except ValueError as e:
        raise CorruptBankFile(f"{path}: unreadable metadata: {e}") from e
    offset += meta_len
    (n_levels,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if offset + 12 * n_levels > len(data) - DIGEST_SIZE:
        raise CorruptBankFile(f"{path}: level table out of range")
    table = [struct.unpack_from("<III", data, offset + 12 * i) for i in range(n_levels)]
    offset += 12 * n_levels

    expected_payload = sum(count * dim * 4 for _, count, dim in table)
    if offset + expected_payload != len(data) - DIGEST_SIZE:
        raise CorruptBankFile(f"{path}: payload length does not match the level table")
    levels: Dict[int, np.ndarray] = {}
    for level, count, dim in table:
        if count == 0:
            raise CorruptBankFile(f"{path}: level {level} is empty")
        nbytes = count * dim * 4
        levels[int(level)] = np.frombuffer(data, dtype="<f4", count=count * dim,
                                           offset=offset).reshape(count, dim).astype(np.float32)
        offset += nbytes

    bank = MemoryBank(levels=levels, metadata=metadata)
    if expected_hash is not None and metadata.get("checkpoint_hash") != expected_hash:
        (logger or NullLogger()).warning(
            f"bank {path.name} was built from checkpoint {metadata.get('checkpoint_hash')}, "
            f"scoring with {expected_hash}", BankMismatchWarning)
    return bank
