"""Snapshot-validated result cache with pending-entry deduplication.

Entries are keyed by the canonical text of the resolved query plus the
per-table snapshot fingerprints it ran under. A fingerprint is
(hwm_write_id, exception-set digest), so any committed write to a referenced
table changes the key and the stale entry simply stops matching; compaction
changes neither component and leaves entries valid.

Concurrent identical cold queries coalesce: the first becomes the pending
owner and executes, the rest block until the owner admits or fails. A failed
or oversized result releases the waiters to run independently.
"""

from __future__ import annotations

import pickle
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

QCACHE_DIR = "_qcache"
DEFAULT_ENTRY_CAP = 64 << 20
DEFAULT_TOTAL_CAP = 1 << 30
DEFAULT_WAIT_TIMEOUT = 60.0

PENDING = "PENDING"
READY = "READY"
FAILED = "FAILED"


@dataclass(frozen=True)
class CacheKey:
    """Identity of one cacheable execution.

    text is the unparsed resolved AST, so table references are qualified and
    the same SQL against different databases yields different keys.
    fingerprints holds (qualified name, hwm_write_id, exceptions digest) per
    referenced table, in resolution order.
    """

    text: str
    fingerprints: tuple
    volatile: bool = False

    @property
    def slot(self):
        return (self.text, self.fingerprints)


def make_key(resolved, wil_of) -> CacheKey:
    from .sql import unparse

    fps = []
    for t in resolved.tables:
        wil = wil_of(t)
        hwm, digest = wil.fingerprint()
        fps.append((t.qualified_name, hwm, digest))
    return CacheKey(
        text=unparse(resolved.node),
        fingerprints=tuple(fps),
        volatile=resolved.volatile,
    )


@dataclass
class CacheEntry:
    key: CacheKey
    state: str
    path: Path | None = None
    size_bytes: int = 0
    created_at: float = 0.0
    last_access: float = 0.0
    event: threading.Event = field(default_factory=threading.Event)


@dataclass
class LookupResult:
    status: str  # "hit" | "miss"
    rows: list | None = None
    owner: bool = False  # on a miss: this caller must admit() or fail()
    waited: bool = False


@dataclass
class CacheCounters:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    waits: int = 0
    wait_hits: int = 0
    wait_timeouts: int = 0
    wait_fallbacks: int = 0
    admits: int = 0
    rejected_volatile: int = 0
    rejected_size: int = 0
    expunged: int = 0
    evicted: int = 0
    executions_saved: int = 0

    def as_dict(self) -> dict:
        return dict(vars(self))


class ResultCache:
    """Process-wide cache of spooled query results."""

    def __init__(self, warehouse, entry_cap_bytes: int = DEFAULT_ENTRY_CAP,
                 total_cap_bytes: int = DEFAULT_TOTAL_CAP,
                 wait_timeout: float = DEFAULT_WAIT_TIMEOUT,
                 clock=time.monotonic):
        self.warehouse = Path(warehouse)
        self.entry_cap_bytes = entry_cap_bytes
        self.total_cap_bytes = total_cap_bytes
        self.wait_timeout = wait_timeout
        self.clock = clock
        self.counters = CacheCounters()
        self._mu = threading.Lock()
        self._entries: dict = {}  # slot -> CacheEntry
        self._total_bytes = 0

    # ------------------------------------------------------------- lookup

    def lookup(self, key: CacheKey) -> LookupResult:
        with self._mu:
            self.counters.lookups += 1
            if key.volatile:
                self.counters.misses += 1
                return LookupResult("miss")
            e = self._entries.get(key.slot)
            if e is None:
                self.counters.misses += 1
                self._entries[key.slot] = CacheEntry(
                    key=key, state=PENDING, created_at=self.clock())
                return LookupResult("miss", owner=True)
            if e.state == READY:
                rows = self._load(e)
                if rows is not None:
                    self.counters.hits += 1
                    self.counters.executions_saved += 1
                    e.last_access = self.clock()
                    return LookupResult("hit", rows=rows)
                self._drop(e)
                self.counters.misses += 1
                self._entries[key.slot] = CacheEntry(
                    key=key, state=PENDING, created_at=self.clock())
                return LookupResult("miss", owner=True)
            # pending: somebody else is computing this exact result
            self.counters.waits += 1
            event = e.event
        if not event.wait(self.wait_timeout):
            with self._mu:
                self.counters.wait_timeouts += 1
                self.counters.misses += 1
            return LookupResult("miss", waited=True)
        with self._mu:
            e = self._entries.get(key.slot)
            if e is not None and e.state == READY:
                rows = self._load(e)
                if rows is not None:
                    self.counters.hits += 1
                    self.counters.wait_hits += 1
                    self.counters.executions_saved += 1
                    e.last_access = self.clock()
                    return LookupResult("hit", rows=rows, waited=True)
            self.counters.wait_fallbacks += 1
            self.counters.misses += 1
            return LookupResult("miss", waited=True)

    # -------------------------------------------------------------- admit

    def admit(self, key: CacheKey, rows) -> bool:
        if key.volatile:
            with self._mu:
                self.counters.rejected_volatile += 1
                self._fail_pending(key)
            return False
        blob = pickle.dumps(list(rows), protocol=pickle.HIGHEST_PROTOCOL)
        if len(blob) > self.entry_cap_bytes:
            with self._mu:
                self.counters.rejected_size += 1
                self._fail_pending(key)
            return False
        path = self._spool_dir() / f"{uuid.uuid4().hex}.bin"
        path.write_bytes(blob)
        with self._mu:
            e = self._entries.get(key.slot)
            if e is not None and e.state == READY:
                path.unlink(missing_ok=True)  # a concurrent admit won
                return True
            now = self.clock()
            entry = CacheEntry(key=key, state=READY, path=path,
                               size_bytes=len(blob), created_at=now,
                               last_access=now)
            if e is not None:
                entry.event = e.event
            self._entries[key.slot] = entry
            self._total_bytes += len(blob)
            entry.event.set()
            self.counters.admits += 1
            self._evict_over_capacity()
        return True

    def fail(self, key: CacheKey) -> None:
        """Owner's execution failed; release waiters to run on their own."""
        with self._mu:
            self._fail_pending(key)

    def _fail_pending(self, key: CacheKey) -> None:
        e = self._entries.get(key.slot)
        if e is not None and e.state == PENDING:
            del self._entries[key.slot]
            e.state = FAILED
            e.event.set()

    # ------------------------------------------------------------ expunge

    def expunge(self, fp_of=None) -> int:
        """Drop entries that can no longer match, then enforce capacity.

        fp_of maps a qualified table name to its current
        (hwm_write_id, digest) pair, or None for a dropped table.
        """
        removed = 0
        with self._mu:
            if fp_of is not None:
                for slot in list(self._entries):
                    e = self._entries[slot]
                    if e.state != READY:
                        continue
                    for qname, hwm, digest in e.key.fingerprints:
                        cur = fp_of(qname)
                        if cur is None or (cur[0], cur[1]) != (hwm, digest):
                            self._drop(e)
                            self.counters.expunged += 1
                            removed += 1
                            break
            removed += self._evict_over_capacity()
        return removed

    def stats(self) -> dict:
        with self._mu:
            d = self.counters.as_dict()
            d["entries"] = len(self._entries)
            d["bytes"] = self._total_bytes
            return d

    # ----------------------------------------------------------- internal

    def _spool_dir(self) -> Path:
        d = self.warehouse / QCACHE_DIR
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _load(self, e: CacheEntry):
        try:
            return pickle.loads(e.path.read_bytes())
        except OSError:
            return None

    def _drop(self, e: CacheEntry) -> None:
        self._entries.pop(e.key.slot, None)
        if e.state == READY:
            self._total_bytes -= e.size_bytes
            if e.path is not None:
                try:
                    e.path.unlink()
                except OSError:
                    pass

    def _evict_over_capacity(self) -> int:
        evicted = 0
        if self._total_bytes <= self.total_cap_bytes:
            return 0
        ready = sorted(
            (e for e in self._entries.values() if e.state == READY),
            key=lambda e: e.last_access)
        for e in ready:
            if self._total_bytes <= self.total_cap_bytes:
                break
            self._drop(e)
            self.counters.evicted += 1
            evicted += 1
        return evicted
