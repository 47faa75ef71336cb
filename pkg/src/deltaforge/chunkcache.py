"""In-memory cache of encoded column chunks with LRFU eviction, plus a
non-evicting metadata cache for file footers.

An entry's worth is its Combined Recency and Frequency value,
CRF(t) = sum over past touches of 2^(-lambda * (t - t_i)), maintained
incrementally as CRF <- 1 + CRF_prev * 2^(-lambda * dt). Time is a logical
access counter, so replay traces are exactly reproducible. lambda = 1 decays
so fast the ordering degenerates to LRU; lambda near 0 barely decays and
approaches LFU with recency tie-breaks.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import DeltaForgeError
from .storage.columnfile import FileMeta
from .storage.io import FileStore

DEFAULT_LAMBDA = 0.01
DEFAULT_CAPACITY = 256 * 1024 * 1024


@dataclass(frozen=True)
class FileIdentity:
    uid: str
    length: int


@dataclass(frozen=True)
class ChunkKey:
    identity: FileIdentity
    row_group: int
    column: int


class _Entry:
    __slots__ = ("data", "size", "crf", "last_touch", "seq")

    def __init__(self, data: bytes, size: int, crf: float, last_touch: int, seq: int):
        self.data = data
        self.size = size
        self.crf = crf
        self.last_touch = last_touch
        self.seq = seq


class ChunkCache:
    def __init__(
        self,
        capacity_bytes: int = DEFAULT_CAPACITY,
        lambda_: float = DEFAULT_LAMBDA,
        store: FileStore | None = None,
    ):
        if not (0.0 < lambda_ <= 1.0):
            raise DeltaForgeError(f"lambda must be in (0, 1], got {lambda_}")
        self.store = store or FileStore()
        self._mu = threading.RLock()
        self._lambda = lambda_
        self._capacity = capacity_bytes
        self._entries: dict[ChunkKey, _Entry] = {}
        self._loading: dict[ChunkKey, threading.Event] = {}
        self._meta: dict[Path, FileMeta] = {}
        self._clock = 0
        self._seq = 0
        self._bytes = 0
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.meta_hits = 0
        self.meta_misses = 0

    # ------------------------------------------------------------ policy

    def set_policy(self, lambda_: float | None = None, capacity_bytes: int | None = None) -> None:
        with self._mu:
            if lambda_ is not None:
                if not (0.0 < lambda_ <= 1.0):
                    raise DeltaForgeError(f"lambda must be in (0, 1], got {lambda_}")
                self._lambda = lambda_
            if capacity_bytes is not None:
                self._capacity = capacity_bytes
                self._evict_to_fit(0, exempt=None)

    def _decayed(self, e: _Entry) -> float:
        return e.crf * 2.0 ** (-self._lambda * (self._clock - e.last_touch))

    def _evict_to_fit(self, incoming: int, exempt: ChunkKey | None) -> None:
        while self._bytes + incoming > self._capacity and self._entries:
            victim_key = None
            victim_rank = None
            for k, e in self._entries.items():
                if k == exempt:
                    continue
                rank = (self._decayed(e), e.last_touch, e.seq)
                if victim_rank is None or rank < victim_rank:
                    victim_key, victim_rank = k, rank
            if victim_key is None:
                break  # only the exempt entry remains
            e = self._entries.pop(victim_key)
            self._bytes -= e.size
            self.evictions += 1

    # ------------------------------------------------------------ chunks

    def get_or_load(self, key: ChunkKey, loader) -> tuple[bytes, bool]:
        """Return (chunk bytes, hit flag). One loader runs per missing key."""
        while True:
            with self._mu:
                e = self._entries.get(key)
                if e is not None:
                    self._clock += 1
                    e.crf = 1.0 + e.crf * 2.0 ** (-self._lambda * (self._clock - e.last_touch))
                    e.last_touch = self._clock
                    self.hits += 1
                    return e.data, True
                ev = self._loading.get(key)
                if ev is None:
                    ev = threading.Event()
                    self._loading[key] = ev
                    break
            ev.wait()

        try:
            data = loader()
        except BaseException:
            with self._mu:
                self._loading.pop(key, None)
            ev.set()
            raise

        with self._mu:
            self.misses += 1
            size = len(data)
            if size <= self._capacity and key not in self._entries:
                self._evict_to_fit(size, exempt=key)
                self._clock += 1
                self._seq += 1
                self._entries[key] = _Entry(data, size, 1.0, self._clock, self._seq)
                self._bytes += size
            self._loading.pop(key, None)
        ev.set()
        return data, False

    # ---------------------------------------------------------- metadata

    def get_meta(self, path: Path) -> FileMeta:
        """Footer metadata, cached without eviction; one disk read per file."""
        path = Path(path)
        with self._mu:
            m = self._meta.get(path)
            if m is not None:
                self.meta_hits += 1
                return m
        m = self.store.read_meta(path)
        with self._mu:
            self._meta[path] = m
            self.meta_misses += 1
        return m

    def metadata_probe(self, path: Path, predicates=()) -> list[int]:
        """Row groups whose min/max ranges could satisfy every predicate.

        ``predicates`` holds (column index, predicate) pairs. The first probe
        pays one footer read; chunks for rejected groups are never requested,
        so they cannot pollute the cache.
        """
        meta = self.get_meta(path)
        selected = []
        for gi, g in enumerate(meta.groups):
            keep = True
            for col_index, pred in predicates:
                cm = g.cols[col_index]
                if not pred.group_may_match(cm.min_value, cm.max_value):
                    keep = False
                    break
            if keep:
                selected.append(gi)
        return selected

    # ------------------------------------------------------------- stats

    def cache_stats(self) -> dict[str, int]:
        with self._mu:
            return {
                "hits": self.hits,
                "misses": self.misses,
                "evictions": self.evictions,
                "bytes": self._bytes,
                "entries": len(self._entries),
                "meta_hits": self.meta_hits,
                "meta_misses": self.meta_misses,
            }

    def resident_keys(self) -> set[ChunkKey]:
        with self._mu:
            return set(self._entries)

    def clear(self) -> None:
        with self._mu:
            self._entries.clear()
            self._meta.clear()
            self._bytes = 0


class CachedIO:
    """Drop-in IO for snapshot_read: metadata and chunks served from cache."""

    def __init__(self, cache: ChunkCache):
        self.cache = cache

    def get_meta(self, path: Path) -> FileMeta:
        return self.cache.get_meta(path)

    def get_chunk_bytes(self, path: Path, meta: FileMeta, gi: int, ci: int) -> bytes:
        key = ChunkKey(FileIdentity(meta.uid, meta.file_length), gi, ci)
        cm = meta.groups[gi].cols[ci]
        data, _ = self.cache.get_or_load(
            key, lambda: self.cache.store.read_range(path, cm.offset, cm.length)
        )
        return data
