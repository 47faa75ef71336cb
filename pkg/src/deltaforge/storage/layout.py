"""On-disk directory grammar and snapshot-driven directory selection.

    <warehouse>/<db>/<table>[/<pcol>=<value>]*/(base_W | delta_X_Y | delete_delta_X_Y)/file_NNNN

Directories are immutable once renamed into place; writers stage under a
``_tmp_`` prefix and commit by rename. Names starting with ``_`` or ``.`` are
administrative and ignored by listings; anything else that fails to parse is a
hard error naming the path.
"""

from __future__ import annotations

import re
import urllib.parse
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

from ..errors import CorruptDirectoryName, StorageError
from ..schema import Column, TypeKind
from ..txn import WriteIdList


class RecordId(NamedTuple):
    write_id: int
    file_id: int
    row_id: int


class DirKind(Enum):
    BASE = "base"
    DELTA = "delta"
    DELETE_DELTA = "delete_delta"


@dataclass(frozen=True)
class AcidDirectory:
    kind: DirKind
    min_write_id: int
    max_write_id: int
    path: Path

    @property
    def name(self) -> str:
        return self.path.name

    @property
    def is_compacted(self) -> bool:
        return self.kind is DirKind.BASE or self.min_write_id != self.max_write_id


_BASE_RE = re.compile(r"^base_(\d+)$")
_DELTA_RE = re.compile(r"^delta_(\d+)_(\d+)$")
_DELETE_RE = re.compile(r"^delete_delta_(\d+)_(\d+)$")


def format_base(write_id: int) -> str:
    return f"base_{write_id}"


def format_delta(min_write_id: int, max_write_id: int) -> str:
    return f"delta_{min_write_id}_{max_write_id}"


def format_delete_delta(min_write_id: int, max_write_id: int) -> str:
    return f"delete_delta_{min_write_id}_{max_write_id}"


def parse_dir_name(name: str, parent: Path) -> AcidDirectory:
    m = _BASE_RE.match(name)
    if m:
        w = int(m.group(1))
        return AcidDirectory(DirKind.BASE, w, w, parent / name)
    m = _DELTA_RE.match(name)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo > hi:
            raise CorruptDirectoryName(f"bad write id range in {parent / name}")
        return AcidDirectory(DirKind.DELTA, lo, hi, parent / name)
    m = _DELETE_RE.match(name)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo > hi:
            raise CorruptDirectoryName(f"bad write id range in {parent / name}")
        return AcidDirectory(DirKind.DELETE_DELTA, lo, hi, parent / name)
    raise CorruptDirectoryName(f"unrecognized directory name {parent / name}")


def list_acid_dirs(partition_dir: Path) -> list[AcidDirectory]:
    if not partition_dir.exists():
        return []
    out = []
    for entry in sorted(partition_dir.iterdir()):
        name = entry.name
        if name.startswith(("_", ".")):
            continue
        if not entry.is_dir():
            raise CorruptDirectoryName(f"unexpected file {entry}")
        out.append(parse_dir_name(name, partition_dir))
    return out


def data_files(directory: AcidDirectory) -> list[tuple[int, Path]]:
    """(file_id, path) pairs inside a committed directory, ordered by id."""
    out = []
    for entry in sorted(directory.path.iterdir()):
        if entry.name.startswith(("_", ".")):
            continue
        m = re.match(r"^file_(\d+)$", entry.name)
        if not m:
            raise CorruptDirectoryName(f"unexpected entry {entry}")
        out.append((int(m.group(1)), entry))
    return out


# ------------------------------------------------------------- partitions

_NULL_SEGMENT = "__NULL__"


def render_partition_value(value, ctype) -> str:
    if value is None:
        return _NULL_SEGMENT
    kind = ctype.kind
    if kind in (TypeKind.INT64, TypeKind.TIMESTAMP, TypeKind.DECIMAL):
        return str(value)
    if kind is TypeKind.BOOL:
        return "true" if value else "false"
    if kind is TypeKind.FLOAT64:
        return repr(value)
    return urllib.parse.quote(value, safe="")


def parse_partition_value(text: str, ctype):
    if text == _NULL_SEGMENT:
        return None
    kind = ctype.kind
    if kind in (TypeKind.INT64, TypeKind.TIMESTAMP, TypeKind.DECIMAL):
        return int(text)
    if kind is TypeKind.BOOL:
        return text == "true"
    if kind is TypeKind.FLOAT64:
        return float(text)
    return urllib.parse.unquote(text)


def render_partition_segment(col: Column, value) -> str:
    return f"{col.name}={render_partition_value(value, col.ctype)}"


def parse_partition_dir(segment: str, col: Column):
    name, sep, raw = segment.partition("=")
    if not sep or name != col.name:
        raise CorruptDirectoryName(f"bad partition segment {segment!r}")
    return parse_partition_value(raw, col.ctype)


def partition_path(warehouse: Path, database: str, table: str, partition_columns, key) -> Path:
    p = Path(warehouse) / database / table
    for col, value in zip(partition_columns, key):
        p = p / render_partition_segment(col, value)
    return p


# -------------------------------------------------------------- selection

@dataclass(frozen=True)
class SelectedDirectories:
    base: AcidDirectory | None
    deltas: tuple[AcidDirectory, ...]
    delete_deltas: tuple[AcidDirectory, ...]

    def all_dirs(self) -> tuple[AcidDirectory, ...]:
        head = (self.base,) if self.base else ()
        return head + self.deltas + self.delete_deltas


def select_directories(dirs: list[AcidDirectory], wil: WriteIdList) -> SelectedDirectories:
    """Pick the directories a snapshot must read.

    Base choice: the largest base_B with B <= hwm whose history contains no
    WriteId that was still open when the snapshot was taken (such a base may
    have deletes from that WriteId folded in, which per-record filtering
    cannot undo). Deltas at or below the chosen base are superseded; compacted
    deltas shadow the originals nested inside their range. Whole directories
    that cannot contain a visible id are discarded here; per-record filtering
    still applies downstream.
    """
    base = None
    for d in dirs:
        if d.kind is not DirKind.BASE or d.min_write_id > wil.hwm_write_id:
            continue
        if any(w <= d.min_write_id for w in wil.open_writeids):
            continue
        if base is None or d.min_write_id > base.min_write_id:
            base = d
    floor = base.min_write_id if base else 0
    deltas = _pick_deltas(dirs, DirKind.DELTA, floor, wil)
    deletes = _pick_deltas(dirs, DirKind.DELETE_DELTA, floor, wil)
    return SelectedDirectories(base, tuple(deltas), tuple(deletes))


def _pick_deltas(dirs, kind: DirKind, floor: int, wil: WriteIdList) -> list[AcidDirectory]:
    candidates = []
    for d in dirs:
        if d.kind is not kind or d.max_write_id <= floor:
            continue
        if d.min_write_id > wil.hwm_write_id:
            continue
        if d.min_write_id == d.max_write_id and d.min_write_id in wil.exceptions:
            continue
        candidates.append(d)
    candidates.sort(key=lambda d: (d.min_write_id, -d.max_write_id))
    picked: list[AcidDirectory] = []
    covered: int | None = None  # highest end of any picked delta range
    for d in candidates:
        if covered is not None and d.max_write_id <= covered:
            continue  # nested inside an already-picked compacted range
        if covered is not None and d.min_write_id <= covered:
            raise StorageError(
                f"delta range {d.path} partially overlaps an already selected range"
            )
        picked.append(d)
        covered = d.max_write_id
    return picked
