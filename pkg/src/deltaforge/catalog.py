"""Persistent metadata authority: tables, partitions, additive statistics,
materialized-view registrations, and resource plans.

Everything lives in one versioned manifest, `warehouse/_catalog/manifest.json`,
rewritten atomically (write-new then rename). Mutations are serialized through
an internal lock; readers see the last committed state.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import (
    CatalogError,
    DanglingMaterializedView,
    DuplicateName,
    MissingStats,
    TableNotFound,
)
from .hll import HllSketch
from .schema import Column, ColumnType, TableDef, TypeKind
from .stats import ColumnStats

MANIFEST_DIR = "_catalog"
MANIFEST_FILE = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class MatViewRecord:
    """Registration state for one materialized view.

    The view's rows live in an ordinary table with the same qualified name;
    this record carries the definition and rebuild bookkeeping. Snapshots are
    stored as (hwm, sorted exception WriteIds) per source table, and
    delete_watermarks as the highest WriteId below which delete markers had
    been applied at last build.
    """

    name: str  # qualified
    definition_text: str
    source_tables: tuple[str, ...]
    source_snapshots: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)
    delete_watermarks: dict[str, int] = field(default_factory=dict)
    last_build_time: float = 0.0
    staleness_window_ms: int = 0


# ------------------------------------------------------- JSON round-trips

def _type_to_json(t: ColumnType) -> dict:
    d = {"kind": t.kind.value}
    if t.kind is TypeKind.DECIMAL:
        d["precision"] = t.precision
        d["scale"] = t.scale
    return d


def _type_from_json(d: dict) -> ColumnType:
    kind = TypeKind(d["kind"])
    if kind is TypeKind.DECIMAL:
        return ColumnType(kind, d["precision"], d["scale"])
    return ColumnType(kind)


def _table_to_json(t: TableDef) -> dict:
    return {
        "database": t.database,
        "name": t.name,
        "columns": [[c.name, _type_to_json(c.ctype)] for c in t.columns],
        "partition_columns": [[c.name, _type_to_json(c.ctype)] for c in t.partition_columns],
        "handler": t.handler,
        "properties": dict(t.properties),
        "declared_order": list(t.declared_order),
    }


def _table_from_json(d: dict) -> TableDef:
    return TableDef(
        database=d["database"],
        name=d["name"],
        columns=tuple(Column(n, _type_from_json(tj)) for n, tj in d["columns"]),
        partition_columns=tuple(Column(n, _type_from_json(tj)) for n, tj in d["partition_columns"]),
        handler=d["handler"],
        properties=dict(d["properties"]),
        declared_order=tuple(d["declared_order"]),
    )


def _stats_to_json(s: ColumnStats) -> dict:
    return {
        "row_count": s.row_count,
        "null_count": s.null_count,
        "min": s.min_value,
        "max": s.max_value,
        "ndv": base64.b64encode(s.ndv_sketch.to_bytes()).decode("ascii"),
    }


def _stats_from_json(d: dict) -> ColumnStats:
    return ColumnStats(
        row_count=d["row_count"],
        null_count=d["null_count"],
        min_value=d["min"],
        max_value=d["max"],
        ndv_sketch=HllSketch.from_bytes(base64.b64decode(d["ndv"])),
    )


def _mv_to_json(m: MatViewRecord) -> dict:
    return {
        "name": m.name,
        "definition_text": m.definition_text,
        "source_tables": list(m.source_tables),
        "source_snapshots": {
            t: [hwm, list(exc)] for t, (hwm, exc) in m.source_snapshots.items()
        },
        "delete_watermarks": dict(m.delete_watermarks),
        "last_build_time": m.last_build_time,
        "staleness_window_ms": m.staleness_window_ms,
    }


def _mv_from_json(d: dict) -> MatViewRecord:
    return MatViewRecord(
        name=d["name"],
        definition_text=d["definition_text"],
        source_tables=tuple(d["source_tables"]),
        source_snapshots={
            t: (hwm, tuple(exc)) for t, (hwm, exc) in d["source_snapshots"].items()
        },
        delete_watermarks=dict(d["delete_watermarks"]),
        last_build_time=d["last_build_time"],
        staleness_window_ms=d["staleness_window_ms"],
    )


def _pkey_key(pkey: tuple) -> str:
    return json.dumps(list(pkey), separators=(",", ":"))


def _pkey_from_key(text: str) -> tuple:
    return tuple(json.loads(text))


class Catalog:
    def __init__(self, warehouse: Path):
        self.warehouse = Path(warehouse)
        self._lock = threading.RLock()
        self._tables: dict[str, TableDef] = {}
        self._partitions: dict[str, dict[str, tuple]] = {}  # table -> {key text: pkey}
        self._stats: dict[str, dict[str, dict[str, ColumnStats]]] = {}
        self._mviews: dict[str, MatViewRecord] = {}
        self._resource_plans: dict[str, dict] = {}
        self._active_plan: str | None = None
        self._load()

    # ------------------------------------------------------- persistence

    @property
    def _manifest_path(self) -> Path:
        return self.warehouse / MANIFEST_DIR / MANIFEST_FILE

    def _load(self) -> None:
        path = self._manifest_path
        if not path.exists():
            return
        doc = json.loads(path.read_text("utf-8"))
        if doc.get("version") != MANIFEST_VERSION:
            raise CatalogError(f"unsupported manifest version {doc.get('version')}")
        for tj in doc["tables"]:
            t = _table_from_json(tj)
            self._tables[t.qualified_name] = t
        for qname, plist in doc["partitions"].items():
            self._partitions[qname] = {_pkey_key(tuple(p)): tuple(p) for p in plist}
        for qname, per_part in doc["stats"].items():
            self._stats[qname] = {
                ptext: {col: _stats_from_json(sj) for col, sj in cols.items()}
                for ptext, cols in per_part.items()
            }
        for mj in doc["mviews"]:
            m = _mv_from_json(mj)
            self._mviews[m.name] = m
        self._resource_plans = doc.get("resource_plans", {})
        self._active_plan = doc.get("active_plan")

    def _save(self) -> None:
        doc = {
            "version": MANIFEST_VERSION,
            "tables": [_table_to_json(t) for t in self._tables.values()],
            "partitions": {
                q: [list(p) for p in parts.values()] for q, parts in self._partitions.items()
            },
            "stats": {
                q: {
                    ptext: {col: _stats_to_json(s) for col, s in cols.items()}
                    for ptext, cols in per_part.items()
                }
                for q, per_part in self._stats.items()
            },
            "mviews": [_mv_to_json(m) for m in self._mviews.values()],
            "resource_plans": self._resource_plans,
            "active_plan": self._active_plan,
        }
        path = self._manifest_path
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, separators=(",", ":")), "utf-8")
        tmp.rename(path)

    # ------------------------------------------------------------ tables

    def create_table(self, tdef: TableDef) -> TableDef:
        with self._lock:
            q = tdef.qualified_name
            if q in self._tables:
                raise DuplicateName(f"table {q} already exists")
            self._tables[q] = tdef
            self._partitions[q] = {}
            self._stats[q] = {}
            if tdef.is_native:
                (self.warehouse / tdef.database / tdef.name).mkdir(parents=True, exist_ok=True)
            self._save()
            return tdef

    def get_table(self, database: str, name: str) -> TableDef:
        q = f"{database}.{name}"
        with self._lock:
            t = self._tables.get(q)
        if t is None:
            raise TableNotFound(f"no such table {q}")
        return t

    def has_table(self, database: str, name: str) -> bool:
        with self._lock:
            return f"{database}.{name}" in self._tables

    def get_tables(self, database: str | None = None) -> list[TableDef]:
        with self._lock:
            out = [
                t for t in self._tables.values()
                if database is None or t.database == database
            ]
        return sorted(out, key=lambda t: t.qualified_name)

    def drop_table(self, database: str, name: str) -> TableDef:
        q = f"{database}.{name}"
        with self._lock:
            t = self._tables.get(q)
            if t is None:
                raise TableNotFound(f"no such table {q}")
            for mv in self._mviews.values():
                if q in mv.source_tables and mv.name != q:
                    raise DanglingMaterializedView(
                        f"table {q} is a source of materialized view {mv.name}"
                    )
            del self._tables[q]
            self._partitions.pop(q, None)
            self._stats.pop(q, None)
            self._mviews.pop(q, None)
            self._save()
            return t

    def set_table_properties(self, database: str, name: str, props: dict[str, str]) -> TableDef:
        with self._lock:
            t = self.get_table(database, name)
            merged = dict(t.properties)
            merged.update(props)
            t2 = replace(t, properties=merged)
            self._tables[t.qualified_name] = t2
            self._save()
            return t2

    # -------------------------------------------------------- partitions

    def add_partition(self, qname: str, pkey: tuple) -> None:
        with self._lock:
            if qname not in self._tables:
                raise TableNotFound(f"no such table {qname}")
            self._partitions[qname][_pkey_key(pkey)] = tuple(pkey)
            self._save()

    def partitions(self, qname: str) -> list[tuple]:
        with self._lock:
            if qname not in self._tables:
                raise TableNotFound(f"no such table {qname}")
            if not self._tables[qname].is_partitioned:
                return [()]
            return sorted(
                self._partitions[qname].values(),
                key=lambda p: tuple((v is None, v) for v in p),
            )

    # ------------------------------------------------------------- stats

    def merge_stats(self, qname: str, pkey: tuple | None, delta: dict[str, ColumnStats]) -> None:
        """Fold per-column deltas computed over newly written rows."""
        with self._lock:
            if qname not in self._tables:
                raise TableNotFound(f"no such table {qname}")
            ptext = _pkey_key(pkey if pkey is not None else ())
            per_part = self._stats.setdefault(qname, {})
            cols = per_part.setdefault(ptext, {})
            for name, s in delta.items():
                cols[name] = cols[name].merged(s) if name in cols else s.copy()
            self._save()

    def replace_stats(self, qname: str, pkey: tuple, stats: dict[str, ColumnStats]) -> None:
        """Recompute path: major compaction rewrites a partition's stats."""
        with self._lock:
            if qname not in self._tables:
                raise TableNotFound(f"no such table {qname}")
            self._stats.setdefault(qname, {})[_pkey_key(pkey)] = {
                c: s.copy() for c, s in stats.items()
            }
            self._save()

    def partition_stats(self, qname: str, pkey: tuple) -> dict[str, ColumnStats]:
        with self._lock:
            return {
                c: s.copy()
                for c, s in self._stats.get(qname, {}).get(_pkey_key(pkey), {}).items()
            }

    def table_stats(self, qname: str) -> dict[str, ColumnStats]:
        """Roll per-partition stats up to table level."""
        with self._lock:
            rolled: dict[str, ColumnStats] = {}
            for cols in self._stats.get(qname, {}).values():
                for name, s in cols.items():
                    rolled[name] = rolled[name].merged(s) if name in rolled else s.copy()
        return rolled

    def estimate_ndv(self, qname: str, column: str) -> int:
        rolled = self.table_stats(qname)
        if column not in rolled:
            raise MissingStats(f"no statistics for {qname}.{column}")
        return rolled[column].ndv()

    def row_count(self, qname: str) -> int | None:
        rolled = self.table_stats(qname)
        if not rolled:
            return None
        return max(s.row_count for s in rolled.values())

    # ------------------------------------------------- materialized views

    def register_materialized_view(self, record: MatViewRecord) -> None:
        with self._lock:
            if record.name not in self._tables:
                raise TableNotFound(f"materialized view storage table {record.name} missing")
            for src in record.source_tables:
                if src not in self._tables:
                    raise TableNotFound(f"materialized view source {src} missing")
            self._mviews[record.name] = record
            self._save()

    def get_materialized_view(self, qname: str) -> MatViewRecord | None:
        with self._lock:
            return self._mviews.get(qname)

    def materialized_views(self) -> list[MatViewRecord]:
        with self._lock:
            return list(self._mviews.values())

    def update_materialized_view(self, record: MatViewRecord) -> None:
        with self._lock:
            if record.name not in self._mviews:
                raise TableNotFound(f"no such materialized view {record.name}")
            self._mviews[record.name] = record
            self._save()

    def is_materialized_view(self, qname: str) -> bool:
        with self._lock:
            return qname in self._mviews

    # ----------------------------------------------------- resource plans

    def store_resource_plan(self, name: str, plan_doc: dict) -> None:
        with self._lock:
            self._resource_plans[name] = plan_doc
            self._save()

    def get_resource_plan(self, name: str) -> dict | None:
        with self._lock:
            return self._resource_plans.get(name)

    def resource_plans(self) -> dict[str, dict]:
        with self._lock:
            return dict(self._resource_plans)

    def set_active_plan(self, name: str | None) -> None:
        with self._lock:
            if name is not None and name not in self._resource_plans:
                raise CatalogError(f"no such resource plan {name}")
            self._active_plan = name
            self._save()

    def active_plan(self) -> str | None:
        with self._lock:
            return self._active_plan
