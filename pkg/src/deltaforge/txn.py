"""Transaction management: ids, snapshots, locks, conflicts, and the journal.

TxnIds are global and monotonic. Each transaction that writes a table gets one
table-scoped WriteId; directory names embed WriteIds, never TxnIds. Readers
carry a GlobalSnapshot (high watermark plus the open/aborted exception set)
and specialize it per table into a WriteIdList.

Durability is a line-oriented journal under <warehouse>/_txnlog/ with exactly
four record kinds: OPEN, ALLOC, COMMIT, ABORT. Replaying it restores counters
and transaction states; transactions left open by a crash are aborted on load.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import LockTimeout, TxnConflict, TxnStateError

OPEN = "OPEN"
COMMITTED = "COMMITTED"
ABORTED = "ABORTED"

JOURNAL_DIR = "_txnlog"
JOURNAL_FILE = "journal.log"


@dataclass(frozen=True)
class GlobalSnapshot:
    high_watermark: int
    open_txns: frozenset[int]
    aborted_txns: frozenset[int]
    alloc_seq: int  # allocation-log position; pins WriteIdList derivation

    @property
    def exceptions(self) -> frozenset[int]:
        return self.open_txns | self.aborted_txns

    def can_see_txn(self, txn_id: int) -> bool:
        return 1 <= txn_id <= self.high_watermark and txn_id not in self.open_txns and txn_id not in self.aborted_txns


@dataclass(frozen=True)
class WriteIdList:
    table: str
    hwm_write_id: int
    open_writeids: frozenset[int]
    aborted_writeids: frozenset[int]

    @property
    def exceptions(self) -> frozenset[int]:
        return self.open_writeids | self.aborted_writeids

    def is_visible(self, write_id: int) -> bool:
        return 1 <= write_id <= self.hwm_write_id and write_id not in self.open_writeids and write_id not in self.aborted_writeids

    def visible_set_equals(self, other: "WriteIdList") -> bool:
        """True when both lists admit exactly the same WriteIds."""
        lo, hi = sorted((self, other), key=lambda w: w.hwm_write_id)
        if any(w > lo.hwm_write_id and not _excepted(hi, w) for w in range(lo.hwm_write_id + 1, hi.hwm_write_id + 1)):
            return False
        bound = lo.hwm_write_id
        return {w for w in lo.exceptions if w <= bound} == {w for w in hi.exceptions if w <= bound}

    def fingerprint(self) -> tuple[int, str]:
        """(hwm, digest of the exception set); the result cache's validity token."""
        import hashlib

        exc = ",".join(str(w) for w in sorted(self.exceptions))
        return self.hwm_write_id, hashlib.sha256(exc.encode()).hexdigest()[:16]


def _excepted(wil: WriteIdList, w: int) -> bool:
    return w in wil.open_writeids or w in wil.aborted_writeids


@dataclass
class _TxnRecord:
    txn_id: int
    state: str
    open_seq: int  # commit-sequence watermark at open; conflict horizon
    write_ids: dict[str, int] = field(default_factory=dict)  # table -> WriteId
    write_set: dict[str, set] = field(default_factory=dict)  # table -> RecordIds updated/deleted


@dataclass
class LockRequest:
    table: str
    partition: tuple | None = None
    exclusive: bool = False


class TxnManager:
    """Single-process transaction authority for one warehouse."""

    def __init__(self, warehouse: Path, lock_timeout: float = 10.0):
        self.warehouse = Path(warehouse)
        self.lock_timeout = lock_timeout
        self._mu = threading.RLock()
        self._lock_cv = threading.Condition(self._mu)
        self._txns: dict[int, _TxnRecord] = {}
        self._next_txn = 1
        self._next_write_id: dict[str, int] = {}
        self._alloc_log: dict[str, list[tuple[int, int, int]]] = {}  # table -> [(seq, wid, txn)]
        self._alloc_seq = 0
        self._commit_seq = 0
        # table -> {record_id: commit_seq of the txn that deleted/updated it}
        self._committed_writes: dict[str, dict] = {}
        self._locks: list[tuple[object, str, tuple | None, bool]] = []
        self._snapshots: dict[int, GlobalSnapshot] = {}
        self._next_snapshot_handle = 1
        jdir = self.warehouse / JOURNAL_DIR
        jdir.mkdir(parents=True, exist_ok=True)
        self._journal_path = jdir / JOURNAL_FILE
        self._replay()
        self._journal = open(self._journal_path, "a", encoding="utf-8")

    # ------------------------------------------------------------- journal

    def _replay(self) -> None:
        if not self._journal_path.exists():
            return
        leftover: list[int] = []
        with open(self._journal_path, encoding="utf-8") as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                kind = parts[0]
                if kind == "OPEN":
                    tid = int(parts[1])
                    self._txns[tid] = _TxnRecord(tid, OPEN, open_seq=0)
                    self._next_txn = max(self._next_txn, tid + 1)
                elif kind == "ALLOC":
                    tid, table, wid = int(parts[1]), parts[2], int(parts[3])
                    self._alloc_seq += 1
                    self._alloc_log.setdefault(table, []).append((self._alloc_seq, wid, tid))
                    self._txns[tid].write_ids[table] = wid
                    nxt = self._next_write_id.get(table, 1)
                    self._next_write_id[table] = max(nxt, wid + 1)
                elif kind == "COMMIT":
                    self._txns[int(parts[1])].state = COMMITTED
                elif kind == "ABORT":
                    self._txns[int(parts[1])].state = ABORTED
        for rec in self._txns.values():
            if rec.state == OPEN:
                leftover.append(rec.txn_id)
        if leftover:
            with open(self._journal_path, "a", encoding="utf-8") as f:
                for tid in leftover:
                    self._txns[tid].state = ABORTED
                    f.write(f"ABORT {tid}\n")

    def _log(self, line: str) -> None:
        self._journal.write(line + "\n")
        self._journal.flush()

    def close(self) -> None:
        with self._mu:
            self._journal.close()

    # ---------------------------------------------------------------- txns

    def open_txn(self) -> int:
        with self._mu:
            tid = self._next_txn
            self._next_txn += 1
            self._txns[tid] = _TxnRecord(tid, OPEN, open_seq=self._commit_seq)
            self._log(f"OPEN {tid}")
            return tid

    def allocate_write_id(self, txn_id: int, table: str) -> int:
        with self._mu:
            rec = self._require_open(txn_id)
            if table in rec.write_ids:
                return rec.write_ids[table]
            wid = self._next_write_id.get(table, 1)
            self._next_write_id[table] = wid + 1
            self._alloc_seq += 1
            self._alloc_log.setdefault(table, []).append((self._alloc_seq, wid, txn_id))
            rec.write_ids[table] = wid
            self._log(f"ALLOC {txn_id} {table} {wid}")
            return wid

    def record_write_set(self, txn_id: int, table: str, record_ids) -> None:
        """Register update/delete targets for first-commit-wins validation."""
        with self._mu:
            rec = self._require_open(txn_id)
            rec.write_set.setdefault(table, set()).update(record_ids)

    def commit_txn(self, txn_id: int) -> int:
        with self._mu:
            rec = self._require_open(txn_id)
            for table, rids in rec.write_set.items():
                seen = self._committed_writes.get(table)
                if not seen:
                    continue
                for rid in rids:
                    seq = seen.get(rid)
                    if seq is not None and seq > rec.open_seq:
                        self._finish(rec, ABORTED)
                        raise TxnConflict(
                            f"txn {txn_id} lost record {rid} in {table} to a later commit"
                        )
            self._commit_seq += 1
            seq = self._commit_seq
            for table, rids in rec.write_set.items():
                dest = self._committed_writes.setdefault(table, {})
                for rid in rids:
                    dest[rid] = seq
            self._finish(rec, COMMITTED)
            return seq

    def abort_txn(self, txn_id: int) -> None:
        with self._mu:
            rec = self._txns.get(txn_id)
            if rec is None or rec.state != OPEN:
                raise TxnStateError(f"txn {txn_id} is not open")
            self._finish(rec, ABORTED)

    def _finish(self, rec: _TxnRecord, state: str) -> None:
        rec.state = state
        self._log(f"{'COMMIT' if state == COMMITTED else 'ABORT'} {rec.txn_id}")
        self._release_owner_locked(rec.txn_id)

    def _require_open(self, txn_id: int) -> _TxnRecord:
        rec = self._txns.get(txn_id)
        if rec is None:
            raise TxnStateError(f"unknown txn {txn_id}")
        if rec.state != OPEN:
            raise TxnStateError(f"txn {txn_id} is {rec.state}")
        return rec

    def txn_state(self, txn_id: int) -> str:
        with self._mu:
            rec = self._txns.get(txn_id)
            if rec is None:
                raise TxnStateError(f"unknown txn {txn_id}")
            return rec.state

    # ----------------------------------------------------------- snapshots

    def get_snapshot(self) -> GlobalSnapshot:
        with self._mu:
            hwm = self._next_txn - 1
            open_set = frozenset(t for t, r in self._txns.items() if r.state == OPEN and t <= hwm)
            aborted = frozenset(t for t, r in self._txns.items() if r.state == ABORTED and t <= hwm)
            return GlobalSnapshot(hwm, open_set, aborted, self._alloc_seq)

    def specialize(self, snapshot: GlobalSnapshot, table: str) -> WriteIdList:
        with self._mu:
            log = self._alloc_log.get(table, ())
            hwm_wid = 0
            open_w: set[int] = set()
            aborted_w: set[int] = set()
            for seq, wid, tid in log:
                if seq > snapshot.alloc_seq:
                    break
                hwm_wid = wid
                if tid in snapshot.open_txns:
                    # Open at snapshot time; stays in the open set even if the
                    # txn has since resolved, or the snapshot would drift.
                    open_w.add(wid)
                elif tid in snapshot.aborted_txns:
                    aborted_w.add(wid)
            return WriteIdList(table, hwm_wid, frozenset(open_w), frozenset(aborted_w))

    def register_active_snapshot(self, snapshot: GlobalSnapshot) -> int:
        with self._mu:
            handle = self._next_snapshot_handle
            self._next_snapshot_handle += 1
            self._snapshots[handle] = snapshot
            return handle

    def release_active_snapshot(self, handle: int) -> None:
        with self._mu:
            self._snapshots.pop(handle, None)

    def active_snapshots(self) -> list[GlobalSnapshot]:
        with self._mu:
            return list(self._snapshots.values())

    def min_active_snapshot(self) -> int:
        """Lowest active high watermark, or the current one when none is registered."""
        with self._mu:
            if self._snapshots:
                return min(s.high_watermark for s in self._snapshots.values())
            return self._next_txn - 1

    # ---------------------------------------------------------- compaction

    def writeid_states(self, table: str) -> dict[int, str]:
        with self._mu:
            return {wid: self._txns[tid].state for _, wid, tid in self._alloc_log.get(table, ())}

    def compaction_ceiling(self, table: str) -> int:
        """Highest WriteId safely mergeable: below every open WriteId."""
        with self._mu:
            highest = 0
            lowest_open: int | None = None
            for _, wid, tid in self._alloc_log.get(table, ()):
                highest = max(highest, wid)
                if self._txns[tid].state == OPEN and (lowest_open is None or wid < lowest_open):
                    lowest_open = wid
            return highest if lowest_open is None else lowest_open - 1

    # --------------------------------------------------------------- locks

    def acquire_lock(self, owner, request: LockRequest, timeout: float | None = None) -> None:
        deadline = time.monotonic() + (self.lock_timeout if timeout is None else timeout)
        with self._lock_cv:
            while True:
                if not self._conflicting(owner, request):
                    self._locks.append((owner, request.table, request.partition, request.exclusive))
                    return
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise LockTimeout(
                        f"lock on {request.table}"
                        + (f" partition {request.partition}" if request.partition else "")
                        + " timed out"
                    )
                self._lock_cv.wait(remaining)

    def _conflicting(self, owner, request: LockRequest) -> bool:
        for held_owner, table, partition, exclusive in self._locks:
            if held_owner == owner or table != request.table:
                continue
            if partition is not None and request.partition is not None and partition != request.partition:
                continue  # disjoint partitions never conflict
            if exclusive or request.exclusive:
                return True
        return False

    def release_locks(self, owner) -> None:
        with self._lock_cv:
            self._release_owner_locked(owner)

    def _release_owner_locked(self, owner) -> None:
        before = len(self._locks)
        self._locks = [l for l in self._locks if l[0] != owner]
        if len(self._locks) != before:
            self._lock_cv.notify_all()

    def held_locks(self) -> list[tuple[object, str, tuple | None, bool]]:
        with self._mu:
            return list(self._locks)
