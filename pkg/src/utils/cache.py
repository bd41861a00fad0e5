"""
Feature cache - DDIM-inversion features stored as content-keyed .npz files
"""

import hashlib
import os
import threading
import warnings
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np

from utils.errors import CacheEntryWarning

Arrays = Dict[str, np.ndarray]


class FeatureCache:
    """
    Maps a key (checkpoint hash, sample digest, geometry, inversion settings)
    to the per-level feature arrays of one sample. A bad entry is a miss.
    """

    def __init__(self, cache_dir: str | Path = "cache"):
        self.root = Path(cache_dir) / "features"
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path_for(self, key: str) -> Path:
        return self.root / f"{hashlib.sha1(key.encode()).hexdigest()}.npz"

    def get(self, key: str) -> Optional[Arrays]:
        path = self.path_for(key)
        if not path.exists():
            return None
        try:
            with np.load(path, allow_pickle=False) as data:
                return {name: data[name] for name in data.files}
        except (OSError, ValueError) as e:
            warnings.warn(f"unreadable feature cache entry {path.name}: {e}", CacheEntryWarning, stacklevel=2)
            return None

    def set(self, key: str, arrays: Arrays):
        # temp file + rename keeps concurrent readers off half-written entries
        path = self.path_for(key)
        tmp = path.with_suffix(f".{threading.get_ident()}.tmp")
        try:
            with open(tmp, "wb") as f:
                np.savez(f, **arrays)
            with self._lock:
                os.replace(tmp, path)
        except OSError as e:
            warnings.warn(f"could not write feature cache entry {path.name}: {e}", CacheEntryWarning, stacklevel=2)
            tmp.unlink(missing_ok=True)

    def get_or_set(self, key: str, compute: Callable[..., Arrays], *args, **kwargs) -> Arrays:
        cached = self.get(key)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        arrays = compute(*args, **kwargs)
        self.set(key, arrays)
        return arrays

    def stats(self) -> Dict[str, Any]:
        entries = list(self.root.glob("*.npz"))
        return {
            "entries": len(entries),
            "size_mb": round(sum(p.stat().st_size for p in entries) / (1024 * 1024), 2),
            "hits": self.hits,
            "misses": self.misses,
        }


def cache_key(*parts: Any) -> str:
    return "|".join(str(p) for p in parts)
