"""Background merge of delta directories: minor (delta with delta), major
(deltas into a new base), and a cleaning phase decoupled from merging.

Compaction never takes table locks. The merge writes a new directory whose
contents duplicate the consumed ones, so every in-flight snapshot keeps
reading the originals; the cleaner removes a directory only once no current
or registered snapshot would select it.
"""

from __future__ import annotations

import shutil
import threading
from dataclasses import dataclass
from pathlib import Path

from .catalog import Catalog
from .errors import NothingToCompact, StorageError
from .schema import INT64, TableDef
from .stats import ColumnStats
from .storage.columnfile import (
    LAYOUT_DELETER_TRIPLES,
    LAYOUT_PLAIN,
    LAYOUT_RID,
    LAYOUT_TRIPLES,
    decode_column_file,
    read_file_meta,
    write_column_file,
)
from .storage.layout import (
    AcidDirectory,
    DirKind,
    RecordId,
    data_files,
    format_base,
    format_delete_delta,
    format_delta,
    list_acid_dirs,
    partition_path,
    select_directories,
)
from .storage.write import write_merged_delete_file
from .txn import ABORTED, TxnManager

NONE = "NONE"
MINOR = "MINOR"
MAJOR = "MAJOR"


@dataclass(frozen=True)
class CompactionPolicy:
    min_delta_count: int = 10
    delta_to_base_ratio: float = 0.1
    check_interval_s: float = 60.0

    def __post_init__(self):
        if self.min_delta_count <= 0 or self.delta_to_base_ratio <= 0:
            raise ValueError("compaction thresholds must be positive")


def _drop_nested(dirs: list[AcidDirectory]) -> list[AcidDirectory]:
    """Keep only directories not covered by a wider compacted one in the list."""
    out = []
    for d in dirs:
        covered = any(
            o is not d
            and o.is_compacted
            and o.min_write_id <= d.min_write_id
            and o.max_write_id >= d.max_write_id
            and (o.max_write_id - o.min_write_id) > (d.max_write_id - d.min_write_id)
            for o in dirs
        )
        if not covered:
            out.append(d)
    return out


def _dir_rows(directory: AcidDirectory) -> int:
    return sum(read_file_meta(path).nrows for _, path in data_files(directory))


def _read_insert_rows(directory: AcidDirectory):
    """Yield (RecordId, data-column tuple) for every row in an insert dir."""
    for file_id, path in data_files(directory):
        _, rows, layout = decode_column_file(path.read_bytes())
        if layout == LAYOUT_RID:
            for row in rows:
                yield RecordId(row[0], row[1], row[2]), row[3:]
        elif layout == LAYOUT_PLAIN:
            for i, row in enumerate(rows):
                yield RecordId(directory.min_write_id, file_id, i), row
        else:
            raise StorageError(f"{path}: unexpected layout in insert directory")


def _read_delete_markers(directory: AcidDirectory):
    """Yield (deleter write id, target RecordId) for every marker."""
    for _, path in data_files(directory):
        _, rows, layout = decode_column_file(path.read_bytes())
        if layout == LAYOUT_TRIPLES:
            for w, f, r in rows:
                yield directory.min_write_id, RecordId(w, f, r)
        elif layout == LAYOUT_DELETER_TRIPLES:
            for d, w, f, r in rows:
                yield d, RecordId(w, f, r)
        else:
            raise StorageError(f"{path}: unexpected layout in delete directory")


class Compactor:
    def __init__(self, warehouse: Path, catalog: Catalog, txn_manager: TxnManager):
        self.warehouse = Path(warehouse)
        self.catalog = catalog
        self.tm = txn_manager
        self._mu = threading.Lock()
        self._part_locks: dict[tuple, threading.Lock] = {}

    def _partition_lock(self, table: TableDef, pkey: tuple) -> threading.Lock:
        key = (table.qualified_name, tuple(pkey))
        with self._mu:
            return self._part_locks.setdefault(key, threading.Lock())

    def _partition_dir(self, table: TableDef, pkey: tuple) -> Path:
        return partition_path(
            self.warehouse, table.database, table.name, table.partition_columns, pkey
        )

    # ---------------------------------------------------------- triggers

    def should_compact(self, table: TableDef, pkey: tuple, policy: CompactionPolicy) -> str:
        dirs = list_acid_dirs(self._partition_dir(table, pkey))
        bases = [d for d in dirs if d.kind is DirKind.BASE]
        base = max(bases, key=lambda d: d.max_write_id) if bases else None
        deltas = _drop_nested([d for d in dirs if d.kind is DirKind.DELTA])
        if base is not None:
            deltas = [d for d in deltas if d.max_write_id > base.max_write_id]
        if base is not None and deltas:
            base_rows = _dir_rows(base)
            delta_rows = sum(_dir_rows(d) for d in deltas)
            if base_rows > 0 and delta_rows / base_rows >= policy.delta_to_base_ratio:
                return MAJOR
        if len(deltas) >= policy.min_delta_count:
            return MINOR
        return NONE

    # ------------------------------------------------------------- minor

    def compact_minor(self, table: TableDef, pkey: tuple) -> AcidDirectory:
        """Merge eligible deltas per kind; sources stay for the cleaner."""
        q = table.qualified_name
        with self._partition_lock(table, pkey):
            ceiling = self.tm.compaction_ceiling(q)
            states = self.tm.writeid_states(q)
            pdir = self._partition_dir(table, pkey)
            dirs = list_acid_dirs(pdir)
            bases = [d for d in dirs if d.kind is DirKind.BASE]
            floor = max((d.max_write_id for d in bases), default=0)

            result: AcidDirectory | None = None
            for kind in (DirKind.DELTA, DirKind.DELETE_DELTA):
                cands = _drop_nested([
                    d for d in dirs
                    if d.kind is kind and d.max_write_id <= ceiling and d.max_write_id > floor
                ])
                if len(cands) < 2:
                    continue
                cands.sort(key=lambda d: d.min_write_id)
                lo = min(d.min_write_id for d in cands)
                hi = max(d.max_write_id for d in cands)
                if kind is DirKind.DELTA:
                    result = self._write_merged_delta(table, pdir, cands, states, lo, hi)
                else:
                    result = self._write_merged_delete(pdir, cands, states, lo, hi)
            if result is None:
                raise NothingToCompact(f"{q} {pkey}: nothing to merge")
            return result

    def _write_merged_delta(self, table, pdir, cands, states, lo, hi) -> AcidDirectory:
        merged = []
        for d in cands:
            for rid, data in _read_insert_rows(d):
                if states.get(rid.write_id) == ABORTED:
                    continue  # aborted history is dropped, not carried forward
                merged.append((rid, data))
        merged.sort(key=lambda t: t[0])
        name = format_delta(lo, hi)
        tmp = pdir / f"_tmp_compact_{name}"
        tmp.mkdir(parents=True, exist_ok=True)
        types = [INT64, INT64, INT64] + [c.ctype for c in table.columns]
        write_column_file(
            tmp / "file_0000",
            types,
            [tuple(rid) + tuple(data) for rid, data in merged],
            layout=LAYOUT_RID,
        )
        final = pdir / name
        tmp.rename(final)
        return AcidDirectory(DirKind.DELTA, lo, hi, final)

    def _write_merged_delete(self, pdir, cands, states, lo, hi) -> AcidDirectory:
        markers = []
        for d in cands:
            for deleter, rid in _read_delete_markers(d):
                if states.get(deleter) == ABORTED:
                    continue
                markers.append((deleter,) + tuple(rid))
        name = format_delete_delta(lo, hi)
        tmp = pdir / f"_tmp_compact_{name}"
        tmp.mkdir(parents=True, exist_ok=True)
        write_merged_delete_file(tmp / "file_0000", markers)
        final = pdir / name
        tmp.rename(final)
        return AcidDirectory(DirKind.DELETE_DELTA, lo, hi, final)

    # ------------------------------------------------------------- major

    def compact_major(self, table: TableDef, pkey: tuple) -> AcidDirectory:
        """Consolidate base plus deltas minus deletes up to the ceiling into a new base."""
        q = table.qualified_name
        with self._partition_lock(table, pkey):
            ceiling = self.tm.compaction_ceiling(q)
            states = self.tm.writeid_states(q)
            pdir = self._partition_dir(table, pkey)
            dirs = list_acid_dirs(pdir)
            bases = [d for d in dirs if d.kind is DirKind.BASE and d.max_write_id <= ceiling]
            base = max(bases, key=lambda d: d.max_write_id) if bases else None
            floor = base.max_write_id if base else 0
            deltas = _drop_nested([
                d for d in dirs
                if d.kind is DirKind.DELTA and floor < d.max_write_id <= ceiling
            ])
            delete_dirs = [
                d for d in dirs
                if d.kind is DirKind.DELETE_DELTA and d.max_write_id <= ceiling
            ]
            delete_dirs = _drop_nested(delete_dirs)
            if not deltas and not delete_dirs:
                raise NothingToCompact(f"{q} {pkey}: no deltas above base")

            deleted: set[RecordId] = set()
            consumed_max = floor
            for d in delete_dirs:
                consumed_max = max(consumed_max, d.max_write_id)
                for deleter, rid in _read_delete_markers(d):
                    if states.get(deleter) == ABORTED:
                        continue
                    deleted.add(rid)

            rows: list[tuple[RecordId, tuple]] = []
            sources = ([base] if base else []) + deltas
            for d in sources:
                consumed_max = max(consumed_max, d.max_write_id)
                for rid, data in _read_insert_rows(d):
                    if states.get(rid.write_id) == ABORTED or rid in deleted:
                        continue
                    rows.append((rid, data))
            rows.sort(key=lambda t: t[0])

            name = format_base(consumed_max)
            tmp = pdir / f"_tmp_compact_{name}"
            tmp.mkdir(parents=True, exist_ok=True)
            types = [INT64, INT64, INT64] + [c.ctype for c in table.columns]
            write_column_file(
                tmp / "file_0000",
                types,
                [tuple(rid) + tuple(data) for rid, data in rows],
                layout=LAYOUT_RID,
            )
            final = pdir / name
            tmp.rename(final)

            # deletes are non-additive, so fold the partition's statistics
            # back to exact values while the consolidated rows are in hand
            fresh = {
                c.name: ColumnStats.from_values([data[i] for _, data in rows])
                for i, c in enumerate(table.columns)
            }
            self.catalog.replace_stats(q, tuple(pkey), fresh)
            return AcidDirectory(DirKind.BASE, consumed_max, consumed_max, final)

    # ------------------------------------------------------------- clean

    def _superseded_by(self, d: AcidDirectory, dirs: list[AcidDirectory]) -> bool:
        for o in dirs:
            if o.path == d.path:
                continue
            if o.kind is DirKind.BASE:
                if d.kind is DirKind.BASE and o.max_write_id > d.max_write_id:
                    return True
                if d.kind is not DirKind.BASE and d.max_write_id <= o.max_write_id:
                    return True
            elif o.kind is d.kind and o.is_compacted:
                if (
                    o.min_write_id <= d.min_write_id
                    and o.max_write_id >= d.max_write_id
                    and (o.max_write_id - o.min_write_id) > (d.max_write_id - d.min_write_id)
                ):
                    return True
        return False

    def clean(self, table: TableDef, pkey: tuple) -> list[Path]:
        """Remove superseded directories no snapshot can still select."""
        q = table.qualified_name
        with self._partition_lock(table, pkey):
            pdir = self._partition_dir(table, pkey)
            dirs = list_acid_dirs(pdir)
            wils = [self.tm.specialize(self.tm.get_snapshot(), q)]
            wils += [self.tm.specialize(s, q) for s in self.tm.active_snapshots()]
            selected_paths: set[Path] = set()
            for wil in wils:
                for d in select_directories(dirs, wil).all_dirs():
                    selected_paths.add(d.path)
            removed = []
            for d in dirs:
                if d.path in selected_paths:
                    continue
                if not self._superseded_by(d, dirs):
                    continue
                shutil.rmtree(d.path, ignore_errors=True)
                removed.append(d.path)
            return removed

    # ----------------------------------------------------------- driving

    def compact_partition(self, table: TableDef, pkey: tuple, major: bool = False,
                          policy: CompactionPolicy | None = None) -> dict:
        """One check-and-act pass; used by the CLI and the background loop."""
        policy = policy or CompactionPolicy()
        report = {"partition": pkey, "action": NONE, "cleaned": 0}
        if major:
            action = MAJOR
        else:
            action = self.should_compact(table, pkey, policy)
        try:
            if action == MAJOR:
                out = self.compact_major(table, pkey)
            elif action == MINOR:
                out = self.compact_minor(table, pkey)
            else:
                out = None
        except NothingToCompact:
            out = None
        if out is not None:
            report["action"] = action
            report["output"] = out.name
        report["cleaned"] = len(self.clean(table, pkey))
        return report

    def compact_table(self, table: TableDef, major: bool = False,
                      policy: CompactionPolicy | None = None,
                      partitions: list[tuple] | None = None) -> list[dict]:
        if partitions is None:
            partitions = self.catalog.partitions(table.qualified_name)
        return [self.compact_partition(table, p, major=major, policy=policy) for p in partitions]
