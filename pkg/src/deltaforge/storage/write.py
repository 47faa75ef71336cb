"""Delta writers. Everything is staged under ``_tmp_`` names owned by the
writing txn; commit is a batch of directory renames, abort removes the stage.
"""

from __future__ import annotations

import shutil
from pathlib import Path

from ..schema import TableDef
from ..stats import ColumnStats
from .columnfile import (
    LAYOUT_DELETER_TRIPLES,
    LAYOUT_TRIPLES,
    ROW_GROUP_ROWS,
    write_column_file,
)
from .layout import RecordId, format_delete_delta, format_delta, partition_path
from ..schema import INT64


class TxnWriter:
    """Accumulates staged directories for one writing transaction."""

    def __init__(self, warehouse: Path, txn_id: int, row_group_rows: int = ROW_GROUP_ROWS):
        self.warehouse = Path(warehouse)
        self.txn_id = txn_id
        self.row_group_rows = row_group_rows
        self._pending: dict[Path, Path] = {}  # tmp dir -> final dir
        self._file_counts: dict[Path, int] = {}

    def _stage_dir(self, table: TableDef, pkey, final_name: str) -> Path:
        part = partition_path(self.warehouse, table.database, table.name, table.partition_columns, pkey)
        tmp = part / f"_tmp_{final_name}.txn{self.txn_id}"
        final = part / final_name
        if tmp not in self._pending:
            tmp.mkdir(parents=True, exist_ok=True)
            self._pending[tmp] = final
            self._file_counts[tmp] = 0
        return tmp

    def _next_file(self, tmp: Path) -> tuple[int, Path]:
        fid = self._file_counts[tmp]
        self._file_counts[tmp] = fid + 1
        return fid, tmp / f"file_{fid:04d}"

    def write_insert_delta(self, table: TableDef, pkey, write_id: int, rows) -> tuple[int, dict]:
        """Write data rows (data columns only, coerced) for one partition.

        Returns (row count, per-column stats delta). Empty input writes nothing.
        """
        rows = list(rows)
        if not rows:
            return 0, {}
        tmp = self._stage_dir(table, pkey, format_delta(write_id, write_id))
        _, path = self._next_file(tmp)
        types = [c.ctype for c in table.columns]
        write_column_file(path, types, rows, row_group_rows=self.row_group_rows)
        stats = {
            c.name: ColumnStats.from_values([r[i] for r in rows])
            for i, c in enumerate(table.columns)
        }
        return len(rows), stats

    def write_delete_delta(self, table: TableDef, pkey, write_id: int, record_ids) -> int:
        """Write delete markers for one partition; triples sorted for merge joins."""
        ids = sorted(set(RecordId(*r) for r in record_ids))
        if not ids:
            return 0
        tmp = self._stage_dir(table, pkey, format_delete_delta(write_id, write_id))
        _, path = self._next_file(tmp)
        write_column_file(
            path,
            [INT64, INT64, INT64],
            ids,
            layout=LAYOUT_TRIPLES,
            row_group_rows=self.row_group_rows,
        )
        return len(ids)

    def staged_partitions(self) -> set[tuple]:
        """(database, table, partition key) for everything staged so far."""
        out = set()
        for tmp in self._pending:
            # the partition dir is the parent of the staged directory
            out.add(tmp.parent)
        return out

    def commit(self) -> None:
        """Rename staged directories into place. Caller journals the commit after."""
        for tmp, final in self._pending.items():
            tmp.rename(final)
        self._pending.clear()

    def discard(self) -> None:
        for tmp in self._pending:
            shutil.rmtree(tmp, ignore_errors=True)
        self._pending.clear()


def write_merged_delete_file(path: Path, markers, row_group_rows: int = ROW_GROUP_ROWS) -> None:
    """Compaction output: (deleter_write_id, target triple) rows, sorted by target."""
    rows = sorted(markers, key=lambda m: (m[1], m[2], m[3]))
    write_column_file(
        path,
        [INT64, INT64, INT64, INT64],
        rows,
        layout=LAYOUT_DELETER_TRIPLES,
        row_group_rows=row_group_rows,
    )
