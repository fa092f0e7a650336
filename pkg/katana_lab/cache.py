"""
On-disk store of TTA feature stacks.

One file per key (image set, model, TTA config, seed, feature kind, N)::

    b"KTNC" | u16 version | u32 meta_len | meta JSON (key fields, digest)
    u32 images | u32 N | u32 width | float32 data (images, N, width)

Writes go to a temp file in the cache directory and are renamed into place,
so readers never see a partial entry. One lock per key serializes writers.
"""

import os
import tempfile
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import structlog

from .classify import compute_tta_features
from .config import TtaConfig
from .exceptions import CacheError, FormatError
from .formats import BinaryReader, BinaryWriter, content_hash, file_hash

log = structlog.get_logger(__name__)

CACHE_MAGIC = b"KTNC"
CACHE_VERSION = 1
LOCK_STRIPES = 64


@dataclass(frozen=True)
class CacheKey:
    image_set: str
    model: str
    tta: str
    seed: int
    kind: str = "logits"
    n: int = 0

    @property
    def digest(self) -> str:
        payload = "|".join(str(v) for v in (self.image_set, self.model, self.tta, self.seed, self.kind, self.n))
        return content_hash(payload.encode("utf-8"))[:24]


def image_set_id(images: np.ndarray, keys: Optional[Sequence[int]] = None) -> str:
    h = content_hash(np.ascontiguousarray(images, dtype=np.float32))
    if keys is not None:
        h = content_hash(h.encode() + content_hash(np.asarray(keys, dtype=np.int64)).encode())
    return h[:16]


class LogitsCache:
    """Keyed feature store. A hit returns the bytes a fresh computation would produce."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0
        # fixed pool: keys sharing a stripe serialize, memory stays bounded
        self._locks = tuple(threading.Lock() for _ in range(LOCK_STRIPES))

    def _lock(self, key: CacheKey) -> threading.Lock:
        return self._locks[int(key.digest, 16) % len(self._locks)]

    def path(self, key: CacheKey) -> Path:
        return self.root / f"{key.kind}-{key.digest}.bin"

    def get(self, key: CacheKey) -> Optional[np.ndarray]:
        path = self.path(key)
        if not path.is_file():
            return None
        r = BinaryReader.open(path)
        _, meta = r.header(CACHE_MAGIC, (CACHE_VERSION,))
        if meta.get("digest") != key.digest:
            raise FormatError(f"cache entry digest {meta.get('digest')} does not match key {key.digest}",
                              path=str(path))
        m, n, width = r.u32(), r.u32(), r.u32()
        data = np.frombuffer(r.raw(m * n * width * 4), dtype="<f4").reshape(m, n, width).astype(np.float32)
        r.expect_end()
        return data

    def put(self, key: CacheKey, features: np.ndarray) -> Path:
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 3:
            raise CacheError(f"cache entries are (images, N, width) stacks, got shape {features.shape}")
        meta = dict(asdict(key), digest=key.digest)
        blob = (BinaryWriter().header(CACHE_MAGIC, CACHE_VERSION, meta)
                .u32(features.shape[0]).u32(features.shape[1]).u32(features.shape[2])
                .raw(features.astype("<f4").tobytes()).getvalue())
        path = self.path(key)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".bin")
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except OSError as exc:
            raise CacheError(f"cannot write cache entry {path}: {exc}", stage="cache") from exc
        return path

    def evict(self, key: CacheKey) -> bool:
        path = self.path(key)
        if path.is_file():
            path.unlink()
            return True
        return False

    def get_or_compute(self, key: CacheKey, compute: Callable[[], np.ndarray]) -> np.ndarray:
        with self._lock(key):
            try:
                cached = self.get(key)
            except FormatError as exc:
                log.warning("cache_entry_unreadable", path=str(self.path(key)), error=str(exc))
                cached = None
            if cached is not None:
                self.hits += 1
                return cached
            self.misses += 1
            features = np.asarray(compute(), dtype=np.float32)
            self.put(key, features)
            log.debug("cache_store", kind=key.kind, digest=key.digest, shape=list(features.shape))
            return features

    def entries(self) -> List[Path]:
        if not self.root.is_dir():
            return []
        return sorted(p for p in self.root.glob("*.bin") if not p.name.startswith(".tmp-"))

    def entry_hashes(self) -> Dict[str, str]:
        return {p.name: file_hash(p) for p in self.entries()}


def cache_logits(model, images: np.ndarray, cfg: TtaConfig, seed: int, store: LogitsCache,
                 keys: Optional[Sequence[int]] = None, kind: str = "logits", n: Optional[int] = None,
                 workers: int = 1, progress: Optional[Callable[[int], None]] = None) -> np.ndarray:
    """TTA features of every image, computed once per key and persisted; (images, N, width)."""
    n = cfg.n if n is None else n
    key = CacheKey(image_set_id(images, keys), model.model_id, cfg.cache_key(), int(seed), kind, n)
    return store.get_or_compute(
        key,
        lambda: compute_tta_features(model, images, cfg, seed, keys=keys, kinds=(kind,), n=n,
                                     workers=workers, progress=progress)[kind],
    )
