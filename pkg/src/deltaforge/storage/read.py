"""Snapshot reads: merge base and insert deltas, anti-join delete markers,
apply pushed predicates with row-group skipping, and count everything.

The IO object is duck-typed: anything with ``get_meta(path)`` and
``get_chunk_bytes(path, meta, group_index, col_index)`` works; DirectIO reads
straight through a FileStore, the chunk cache provides a caching drop-in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..errors import StorageError
from ..schema import TableDef
from ..txn import WriteIdList
from .columnfile import (
    LAYOUT_DELETER_TRIPLES,
    LAYOUT_PLAIN,
    LAYOUT_RID,
    LAYOUT_TRIPLES,
    FileMeta,
    decode_chunk,
)
from .io import FileStore
from .layout import (
    AcidDirectory,
    DirKind,
    RecordId,
    data_files,
    list_acid_dirs,
    partition_path,
    select_directories,
)


class DirectIO:
    """Uncached IO: every metadata and chunk access is a disk read."""

    def __init__(self, store: FileStore | None = None):
        self.store = store or FileStore()

    def get_meta(self, path: Path) -> FileMeta:
        return self.store.read_meta(path)

    def get_chunk_bytes(self, path: Path, meta: FileMeta, gi: int, ci: int) -> bytes:
        cm = meta.groups[gi].cols[ci]
        return self.store.read_range(path, cm.offset, cm.length)


# ------------------------------------------------------------- predicates

_OPS = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


@dataclass(frozen=True)
class ColumnPredicate:
    column: str
    op: str
    value: object

    def row_matches(self, v) -> bool:
        if v is None or self.value is None:
            return False
        return _OPS[self.op](v, self.value)

    def group_may_match(self, vmin, vmax) -> bool:
        if vmin is None:  # all-null group
            return False
        v = self.value
        if v is None:
            return False
        if self.op == "=":
            return vmin <= v <= vmax
        if self.op == "!=":
            return not (vmin == vmax == v)
        if self.op == "<":
            return vmin < v
        if self.op == "<=":
            return vmin <= v
        if self.op == ">":
            return vmax > v
        return vmax >= v


@dataclass(frozen=True)
class InPredicate:
    column: str
    values: tuple

    def row_matches(self, v) -> bool:
        return v is not None and v in self.values

    def group_may_match(self, vmin, vmax) -> bool:
        if vmin is None:
            return False
        return any(x is not None and vmin <= x <= vmax for x in self.values)


@dataclass(frozen=True)
class RangePredicate:
    """Semijoin-reducer payload, part one: the [lo, hi] key range."""

    column: str
    lo: object
    hi: object

    def row_matches(self, v) -> bool:
        return v is not None and self.lo <= v <= self.hi

    def group_may_match(self, vmin, vmax) -> bool:
        if vmin is None:
            return False
        return not (vmax < self.lo or vmin > self.hi)


@dataclass(frozen=True)
class BloomPredicate:
    """Semijoin-reducer payload, part two: membership filter, row level only."""

    column: str
    bloom: object  # plan.semijoin.BloomFilter

    def row_matches(self, v) -> bool:
        return v is not None and self.bloom.may_contain(v)

    def group_may_match(self, vmin, vmax) -> bool:
        return vmin is not None


@dataclass
class ScanRequest:
    table: TableDef
    wil: WriteIdList
    partitions: list[tuple]  # concrete partition keys; [()] for unpartitioned
    projection: list[str] | None = None
    predicates: list = field(default_factory=list)
    include_record_ids: bool = False
    # Incremental-maintenance hooks: row visibility evaluated against these
    # instead of / in addition to wil (directory selection always uses wil).
    as_of: WriteIdList | None = None
    new_rows_baseline: WriteIdList | None = None


@dataclass
class ScanCounters:
    rows_decoded: int = 0
    rows_filtered_by_visibility: int = 0
    rows_deleted_by_antijoin: int = 0
    rows_emitted: int = 0
    rows_returned: int = 0
    row_groups_read: int = 0
    row_groups_skipped: int = 0
    partitions_scanned: int = 0
    partitions_skipped: int = 0

    def merged(self, other: "ScanCounters") -> "ScanCounters":
        return ScanCounters(
            *(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__)
        )

    def as_dict(self) -> dict[str, int]:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def _load_delete_set(io, directory: AcidDirectory, vis: WriteIdList) -> set[RecordId]:
    """Visible delete markers in one delete-delta directory."""
    out: set[RecordId] = set()
    for _, path in data_files(directory):
        meta = io.get_meta(path)
        if meta.layout == LAYOUT_TRIPLES:
            if not vis.is_visible(directory.min_write_id):
                continue
            deleter_stored = False
        elif meta.layout == LAYOUT_DELETER_TRIPLES:
            deleter_stored = True
        else:
            raise StorageError(f"{path}: not a delete-delta file")
        for gi, g in enumerate(meta.groups):
            cols = [
                decode_chunk(meta.types[ci], io.get_chunk_bytes(path, meta, gi, ci), g.rows)
                for ci in range(len(meta.types))
            ]
            if deleter_stored:
                for d, w, f, r in zip(*cols):
                    if vis.is_visible(d):
                        out.add(RecordId(w, f, r))
            else:
                for w, f, r in zip(*cols):
                    out.add(RecordId(w, f, r))
    return out


def snapshot_read(warehouse: Path, req: ScanRequest, io=None, counters: ScanCounters | None = None):
    """Generator of projected row tuples under the request's snapshot."""
    if io is None:
        io = DirectIO()
    if counters is None:
        counters = ScanCounters()
    table = req.table
    vis = req.as_of or req.wil
    baseline = req.new_rows_baseline
    pcols = table.partition_columns
    pcol_names = [c.name for c in pcols]
    data_names = [c.name for c in table.columns]
    out_names = list(req.projection) if req.projection is not None else [
        c.name for c in table.logical_columns()
    ]

    pred_on_data = [p for p in req.predicates if p.column in data_names]
    pred_on_part = [p for p in req.predicates if p.column in pcol_names]

    for pkey in req.partitions:
        pvals = dict(zip(pcol_names, pkey))
        if any(not p.row_matches(pvals[p.column]) for p in pred_on_part):
            counters.partitions_skipped += 1
            continue
        counters.partitions_scanned += 1
        pdir = partition_path(warehouse, table.database, table.name, pcols, pkey)
        selected = select_directories(list_acid_dirs(pdir), req.wil)
        delete_set: set[RecordId] = set()
        for d in selected.delete_deltas:
            delete_set |= _load_delete_set(io, d, vis)
        read_dirs = ([selected.base] if selected.base else []) + list(selected.deltas)
        for directory in read_dirs:
            yield from _scan_directory(
                io, directory, req, vis, baseline, delete_set, pvals, out_names,
                data_names, pred_on_data, counters,
            )


def _scan_directory(
    io, directory, req, vis, baseline, delete_set, pvals, out_names, data_names,
    preds, counters,
):
    table = req.table
    single_write_id = directory.min_write_id if not directory.is_compacted else None
    for file_id, path in data_files(directory):
        meta = io.get_meta(path)
        if meta.layout == LAYOUT_RID:
            sys_cols = 3
        elif meta.layout == LAYOUT_PLAIN:
            sys_cols = 0
        else:
            raise StorageError(f"{path}: not an insert data file")
        col_index = {name: sys_cols + i for i, name in enumerate(data_names)}
        needed: list[int] = []
        if sys_cols:
            needed.extend([0, 1, 2])
        needed_names = set()
        for name in out_names:
            if name in col_index:
                needed_names.add(name)
        for p in preds:
            needed_names.add(p.column)
        if req.include_record_ids and not sys_cols:
            pass  # ids derived from position, no extra column
        needed.extend(sorted(col_index[n] for n in needed_names))

        row_base = 0  # running row ordinal for derived row ids
        for gi, g in enumerate(meta.groups):
            skip = False
            for p in preds:
                cm = g.cols[col_index[p.column]]
                if not p.group_may_match(cm.min_value, cm.max_value):
                    skip = True
                    break
            if skip:
                counters.row_groups_skipped += 1
                row_base += g.rows
                continue
            counters.row_groups_read += 1
            cols: dict[int, list] = {}
            for ci in set(needed):
                chunk = io.get_chunk_bytes(path, meta, gi, ci)
                cols[ci] = decode_chunk(meta.types[ci], chunk, g.rows)
            counters.rows_decoded += g.rows
            for i in range(g.rows):
                if sys_cols:
                    rid = RecordId(cols[0][i], cols[1][i], cols[2][i])
                    w = rid.write_id
                else:
                    rid = RecordId(single_write_id, file_id, row_base + i)
                    w = single_write_id
                if not vis.is_visible(w) or (baseline is not None and baseline.is_visible(w)):
                    counters.rows_filtered_by_visibility += 1
                    continue
                if rid in delete_set:
                    counters.rows_deleted_by_antijoin += 1
                    continue
                counters.rows_emitted += 1
                ok = True
                for p in preds:
                    if not p.row_matches(cols[col_index[p.column]][i]):
                        ok = False
                        break
                if not ok:
                    continue
                counters.rows_returned += 1
                values = tuple(
                    cols[col_index[n]][i] if n in col_index else pvals[n] for n in out_names
                )
                if req.include_record_ids:
                    yield (rid,) + values
                else:
                    yield values
            row_base += g.rows
