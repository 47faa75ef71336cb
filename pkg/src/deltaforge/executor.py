"""Pull-based batch executor for physical plans.

Operators are generators yielding lists of row tuples (batches of up to
BATCH_SIZE rows). Each operator is wrapped in an instrumentation layer that
collects exact per-operator row counts, inclusive wall time, and peak memory
charges; scans additionally record row-group and cache counters. A plan node
can execute more than once in a single query (a semijoin reducer source is
also a join input), so every execution produces its own OpStats entry.

Memory accounting: hash-join builds, aggregation state, and spools charge the
shared query budget and raise BudgetExceeded when they run past it. Sorts
never raise; they spill runs to warehouse/_tmp/<query-id>/ and merge.
"""

from __future__ import annotations

import heapq
import pickle
import shutil
import threading
import time
import uuid
from dataclasses import dataclass, field
from decimal import Decimal
from functools import cmp_to_key
from pathlib import Path

from .chunkcache import ChunkCache, ChunkKey, FileIdentity
from .errors import BudgetExceeded, ExecutionError, FederationError, QueryKilled
from .plan import nodes as pn
from .plan.expr import compile_expr, compile_predicate, conjoin
from .plan.optimizer import _exact_storage
from .plan.semijoin import BloomFilter
from .schema import TypeKind
from .storage.read import (
    BloomPredicate,
    DirectIO,
    RangePredicate,
    ScanCounters,
    ScanRequest,
    snapshot_read,
)

BATCH_SIZE = 1024
DEFAULT_MEMORY_BUDGET = 1 << 30
DEFAULT_SORT_SPILL_BYTES = 64 << 20
DEFAULT_BLOOM_FPP = 0.01

# fixed column order for the profile dump
PROFILE_COLUMNS = (
    "operator",
    "rows_out",
    "peak_memory_bytes",
    "wall_ms",
    "row_groups_read",
    "row_groups_skipped",
    "cache_hits",
    "cache_misses",
    "complete",
)


# ---------------------------------------------------------------- statistics


@dataclass
class OpStats:
    """Runtime counters for one execution of one operator."""

    kind: str
    fingerprint: str
    label: str
    rows_out: int = 0
    peak_memory_bytes: int = 0
    wall_ms: float = 0.0
    complete: bool = False
    scan: ScanCounters | None = None
    cache_hits: int = 0
    cache_misses: int = 0

    def as_dict(self) -> dict:
        d = {
            "operator": self.label,
            "rows_out": self.rows_out,
            "peak_memory_bytes": self.peak_memory_bytes,
            "wall_ms": round(self.wall_ms, 3),
            "row_groups_read": self.scan.row_groups_read if self.scan else 0,
            "row_groups_skipped": self.scan.row_groups_skipped if self.scan else 0,
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
            "complete": self.complete,
        }
        return d


class RuntimeStats:
    """All operator executions of one query attempt, in start order."""

    def __init__(self):
        self.operators: list[OpStats] = []

    def op(self, node: pn.PlanNode) -> OpStats:
        label = node.kind
        if isinstance(node, pn.ScanNode) and node.table is not None:
            label = f"SCAN {node.table.qualified_name}"
        st = OpStats(kind=node.kind, fingerprint=node.fingerprint(), label=label)
        self.operators.append(st)
        return st

    def to_overrides(self) -> dict[str, float]:
        """Observed row counts keyed by logical fingerprint.

        Complete operators contribute exact counts. An interrupted operator
        contributes its partial count only when it produced something: a
        partial count is a usable lower bound, but zero rows from an operator
        that barely started would poison the estimate. Duplicate fingerprints
        (a subtree executed twice) keep the larger observation.
        """
        out: dict[str, float] = {}
        for st in self.operators:
            if not st.complete and st.rows_out == 0:
                continue
            n = float(st.rows_out)
            prev = out.get(st.fingerprint)
            if prev is None or n > prev:
                out[st.fingerprint] = n
        return out

    def scan_totals(self) -> ScanCounters:
        total = ScanCounters()
        for st in self.operators:
            if st.scan is not None:
                total = total.merged(st.scan)
        return total

    def cache_totals(self) -> tuple[int, int]:
        hits = sum(st.cache_hits for st in self.operators)
        misses = sum(st.cache_misses for st in self.operators)
        return hits, misses

    def partial_dict(self) -> dict:
        return {"operators": [st.as_dict() for st in self.operators]}


def format_profile(stats: RuntimeStats) -> str:
    """Aligned per-operator stats table; column order is fixed."""
    rows = [[str(st.as_dict()[c]) for c in PROFILE_COLUMNS]
            for st in stats.operators]
    widths = [len(c) for c in PROFILE_COLUMNS]
    for r in rows:
        for i, cell in enumerate(r):
            widths[i] = max(widths[i], len(cell))
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(PROFILE_COLUMNS)]
    out.extend(line(r) for r in rows)
    return "\n".join(out)


# -------------------------------------------------------------------- budget


class Budget:
    """Shared memory budget for one query attempt."""

    def __init__(self, limit_bytes: int, stats: RuntimeStats):
        if limit_bytes <= 0:
            raise ExecutionError(f"memory budget must be positive, got {limit_bytes}")
        self.limit = limit_bytes
        self.used = 0
        self.peak = 0
        self._stats = stats

    def charge(self, n: int) -> None:
        self.used += n
        if self.used > self.peak:
            self.peak = self.used
        if self.used > self.limit:
            raise BudgetExceeded(
                f"memory budget exceeded: {self.used} > {self.limit} bytes",
                partial_stats=self._stats.partial_dict(),
            )

    def try_charge(self, n: int) -> bool:
        """Charge without raising; sorts spill instead of failing."""
        if self.used + n > self.limit:
            return False
        self.used += n
        if self.used > self.peak:
            self.peak = self.used
        return True

    def release(self, n: int) -> None:
        self.used -= n
        if self.used < 0:
            self.used = 0

    def headroom(self) -> int:
        return max(self.limit - self.used, 0)


def _value_bytes(v) -> int:
    if v is None or isinstance(v, bool):
        return 8
    if isinstance(v, int):
        return 32
    if isinstance(v, float):
        return 24
    if isinstance(v, str):
        return 56 + len(v)
    if isinstance(v, Decimal):
        return 80
    return 64


def _row_bytes(row) -> int:
    return 56 + 8 * len(row) + sum(_value_bytes(v) for v in row)


# ------------------------------------------------------------------- context


@dataclass
class ExecContext:
    """Everything one query attempt needs to run.

    The workload manager supplies memory_budget_bytes from the admitting
    pool; attempt counts reexecutions (0 = first run). The overlay map is
    carried along so reexecution strategies can consult it.
    """

    catalog: object = None
    snapshot: object = None
    memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET
    overlay: dict = field(default_factory=dict)
    attempt: int = 0
    cache: ChunkCache | None = None
    handlers: dict = field(default_factory=dict)
    query_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    batch_size: int = BATCH_SIZE
    sort_spill_bytes: int = DEFAULT_SORT_SPILL_BYTES
    bloom_fpp: float = DEFAULT_BLOOM_FPP
    kill_event: threading.Event | None = None
    kill_reason: str = ""
    stats: RuntimeStats = None
    budget: Budget = None

    def __post_init__(self):
        if self.stats is None:
            self.stats = RuntimeStats()
        if self.budget is None:
            self.budget = Budget(self.memory_budget_bytes, self.stats)
        self._spools: dict[str, list] = {}
        self._tmp_used = False

    def check_kill(self) -> None:
        if self.kill_event is not None and self.kill_event.is_set():
            raise QueryKilled(self.kill_reason or "query killed")

    def tmp_dir(self) -> Path:
        d = Path(self.catalog.warehouse) / "_tmp" / self.query_id
        d.mkdir(parents=True, exist_ok=True)
        self._tmp_used = True
        return d

    def cleanup(self) -> None:
        if self._tmp_used:
            shutil.rmtree(
                Path(self.catalog.warehouse) / "_tmp" / self.query_id,
                ignore_errors=True,
            )
            self._tmp_used = False


# ----------------------------------------------------------- instrumentation


def _instrument(st: OpStats, inner, ctx: ExecContext):
    """Wrap an operator generator with row/time accounting and kill checks."""
    it = iter(inner)
    try:
        while True:
            ctx.check_kill()
            enter = time.perf_counter()
            try:
                batch = next(it)
            except StopIteration:
                st.wall_ms += (time.perf_counter() - enter) * 1000.0
                st.complete = True
                return
            st.wall_ms += (time.perf_counter() - enter) * 1000.0
            st.rows_out += len(batch)
            yield batch
    finally:
        close = getattr(it, "close", None)
        if close is not None:
            close()


def _layout(node: pn.PlanNode) -> dict[str, int]:
    return {c.ident: i for i, c in enumerate(node.schema)}


def _rebatch(batches, size):
    """Repack an iterable of batches into batches of exactly `size` rows."""
    buf = []
    for b in batches:
        buf.extend(b)
        while len(buf) >= size:
            yield buf[:size]
            buf = buf[size:]
    if buf:
        yield buf


# --------------------------------------------------------------------- scan


class _CountingIO:
    """Chunk cache adapter that attributes hits and misses to one scan."""

    def __init__(self, cache: ChunkCache, st: OpStats):
        self.cache = cache
        self.st = st

    def get_meta(self, path):
        return self.cache.get_meta(path)

    def get_chunk_bytes(self, path, meta, gi, ci):
        key = ChunkKey(FileIdentity(meta.uid, meta.file_length), gi, ci)
        cm = meta.groups[gi].cols[ci]
        data, hit = self.cache.get_or_load(
            key, lambda: self.cache.store.read_range(path, cm.offset, cm.length)
        )
        if hit:
            self.st.cache_hits += 1
        else:
            self.st.cache_misses += 1
        return data


def _reducer_values(red: pn.ReducerNode, ctx: ExecContext) -> set:
    """Distinct non-null source values for one semijoin reducer."""
    slot = None
    for i, c in enumerate(red.source.schema):
        if c.ident == red.source_ident:
            slot = i
            break
    if slot is None:
        raise ExecutionError(
            f"reducer source column {red.source_ident} missing from subplan")
    st = ctx.stats.op(red)
    values: set = set()
    gen = _instrument(st, _exec_node(red.source, ctx), ctx)
    try:
        for batch in gen:
            for row in batch:
                v = row[slot]
                if v is not None:
                    values.add(v)
    finally:
        gen.close()
    return values


def _storage_values(values, ctype) -> set:
    """Convert reducer values to the target column's storage domain.

    A value that has no exact storage form cannot equal any stored value,
    so it is dropped rather than approximated.
    """
    out = set()
    for v in values:
        ok, sv = _exact_storage(v, ctype)
        if ok and sv is not None:
            out.add(sv)
    return out


def _scan_converters(node: pn.ScanNode):
    """Per-column storage-to-pipeline converters, or None if all identity."""
    convs = []
    any_conv = False
    for c in node.schema:
        if c.ctype is not None and c.ctype.kind is TypeKind.DECIMAL:
            s = c.ctype.scale
            convs.append(lambda v, s=s: None if v is None else Decimal(v).scaleb(-s))
            any_conv = True
        else:
            convs.append(None)
    return convs if any_conv else None


def _exec_scan(node: pn.ScanNode, ctx: ExecContext, st: OpStats):
    table = node.table
    if table is None:
        return
    if not table.is_native:
        yield from _exec_external_scan(node, ctx, st)
        return

    st.scan = ScanCounters()

    partitions = node.partitions
    if partitions is None:
        partitions = tuple(ctx.catalog.partitions(table.qualified_name))
    partitions = list(partitions)
    extra_preds = []
    for red in node.reducers:
        values = _reducer_values(red, ctx)
        col = table.column(red.target_column)
        svals = _storage_values(values, col.ctype)
        if not svals:
            return  # nothing can match; never touch storage
        if red.variant == "partition":
            pos = table.partition_column_names().index(red.target_column)
            partitions = [p for p in partitions if p[pos] in svals]
            if not partitions:
                return
        else:
            # range test goes first so the Bloom probe only sees candidates
            bloom = BloomFilter(len(svals), ctx.bloom_fpp)
            for v in svals:
                bloom.add(v)
            extra_preds.append(RangePredicate(red.target_column, min(svals), max(svals)))
            extra_preds.append(BloomPredicate(red.target_column, bloom))

    req = ScanRequest(
        table=table,
        wil=node.wil,
        partitions=partitions,
        projection=list(node.projection),
        predicates=list(node.pushed) + extra_preds,
        as_of=node.as_of,
        new_rows_baseline=node.new_rows_baseline,
    )
    io = _CountingIO(ctx.cache, st) if ctx.cache is not None else DirectIO()
    rows = snapshot_read(ctx.catalog.warehouse, req, io=io, counters=st.scan)

    convs = _scan_converters(node)
    keep = None
    if node.residual:
        keep = compile_predicate(conjoin(list(node.residual)), _layout(node))

    batch = []
    size = ctx.batch_size
    for row in rows:
        if convs is not None:
            row = tuple(v if f is None else f(v) for f, v in zip(convs, row))
        if keep is not None and not keep(row):
            continue
        batch.append(row)
        if len(batch) >= size:
            yield batch
            batch = []
    if batch:
        yield batch


def _exec_external_scan(node: pn.ScanNode, ctx: ExecContext, st: OpStats):
    table = node.table
    handler = ctx.handlers.get(table.handler)
    if handler is None:
        raise FederationError(
            f"no storage handler registered for '{table.handler}'")

    if node.absorbed:
        rows = handler.execute_pushed(node)
    else:
        logical = [c.name for c in table.logical_columns()]
        idx = [logical.index(name) for name in node.projection]
        def _project():
            for split in handler.read_splits(table):
                for row in handler.read_split(table, split):
                    yield tuple(row[i] for i in idx)
        rows = _project()

    keep = None
    if node.residual:
        keep = compile_predicate(conjoin(list(node.residual)), _layout(node))
    preds = list(node.pushed)

    batch = []
    size = ctx.batch_size
    layout = _layout(node)
    for row in rows:
        if preds and not all(
                p.row_matches(row[layout[f"{node.binding}.{p.column}"]])
                for p in preds):
            continue
        if keep is not None and not keep(row):
            continue
        batch.append(row)
        if len(batch) >= size:
            yield batch
            batch = []
    if batch:
        yield batch


# ---------------------------------------------------------- filter / project


def _exec_filter(node: pn.FilterNode, ctx: ExecContext, st: OpStats):
    keep = compile_predicate(conjoin(list(node.conjuncts)), _layout(node.children[0]))
    child = _exec_node(node.children[0], ctx)
    try:
        for batch in child:
            out = [row for row in batch if keep(row)]
            if out:
                yield out
    finally:
        child.close()


def _exec_project(node: pn.ProjectNode, ctx: ExecContext, st: OpStats):
    layout = _layout(node.children[0])
    fns = [compile_expr(e, layout) for e in node.exprs]
    child = _exec_node(node.children[0], ctx)
    try:
        for batch in child:
            yield [tuple(f(row) for f in fns) for row in batch]
    finally:
        child.close()


# -------------------------------------------------------------------- joins


def _key_fn(keys, layout):
    fns = [compile_expr(k, layout) for k in keys]
    def kf(row):
        return tuple(f(row) for f in fns)
    return kf


def _exec_hash_join(node: pn.HashJoinNode, ctx: ExecContext, st: OpStats):
    left, right = node.children
    if node.build_side == "left":
        build, probe = left, right
        build_keys, probe_keys = node.left_keys, node.right_keys
        build_is_left = True
    else:
        build, probe = right, left
        build_keys, probe_keys = node.right_keys, node.left_keys
        build_is_left = False

    bkf = _key_fn(build_keys, _layout(build))
    pkf = _key_fn(probe_keys, _layout(probe))

    table: dict = {}
    charged = 0
    child = _exec_node(build, ctx)
    try:
        try:
            for batch in child:
                add = 0
                for row in batch:
                    k = bkf(row)
                    if None in k:
                        continue  # null keys never join
                    table.setdefault(k, []).append(row)
                    add += _row_bytes(row) + 48
                if add:
                    ctx.budget.charge(add)
                    charged += add
                    if charged > st.peak_memory_bytes:
                        st.peak_memory_bytes = charged
        finally:
            child.close()

        size = ctx.batch_size
        out = []
        probe_gen = _exec_node(probe, ctx)
        try:
            if not build_keys:
                # cross join: every build row against every probe row
                rows = table.get((), [])
                for batch in probe_gen:
                    for prow in batch:
                        for brow in rows:
                            out.append(brow + prow if build_is_left else prow + brow)
                            if len(out) >= size:
                                yield out
                                out = []
            else:
                for batch in probe_gen:
                    for prow in batch:
                        k = pkf(prow)
                        if None in k:
                            continue
                        matches = table.get(k)
                        if not matches:
                            continue
                        for brow in matches:
                            out.append(brow + prow if build_is_left else prow + brow)
                            if len(out) >= size:
                                yield out
                                out = []
        finally:
            probe_gen.close()
        if out:
            yield out
    finally:
        ctx.budget.release(charged)


def _cmp_vals(a, b) -> int:
    # null sorts lowest; callers drop null join keys before comparing
    if a is None:
        return 0 if b is None else -1
    if b is None:
        return 1
    if a < b:
        return -1
    if a > b:
        return 1
    return 0


def _cmp_tuples(a, b) -> int:
    for x, y in zip(a, b):
        c = _cmp_vals(x, y)
        if c:
            return c
    return 0


def _exec_merge_join(node: pn.MergeJoinNode, ctx: ExecContext, st: OpStats):
    left, right = node.children
    lkf = _key_fn(node.left_keys, _layout(left))
    rkf = _key_fn(node.right_keys, _layout(right))

    def keyed(side, kf):
        gen = _exec_node(side, ctx)
        try:
            for batch in gen:
                for row in batch:
                    k = kf(row)
                    if None in k:
                        continue
                    yield (k, row)
        finally:
            gen.close()

    asc = [False] * len(node.left_keys)
    lsorted = _external_sort(keyed(left, lkf), asc, ctx, st)
    rsorted = _external_sort(keyed(right, rkf), asc, ctx, st)

    size = ctx.batch_size
    out = []
    li = iter(lsorted)
    ri = iter(rsorted)
    lrow = next(li, None)
    rrow = next(ri, None)
    charged = 0
    try:
        while lrow is not None and rrow is not None:
            c = _cmp_tuples(lrow[0], rrow[0])
            if c < 0:
                lrow = next(li, None)
            elif c > 0:
                rrow = next(ri, None)
            else:
                # buffer the right-side group, stream the left side over it
                key = rrow[0]
                group = []
                gbytes = 0
                while rrow is not None and _cmp_tuples(rrow[0], key) == 0:
                    group.append(rrow[1])
                    gbytes += _row_bytes(rrow[1]) + 48
                    rrow = next(ri, None)
                ctx.budget.charge(gbytes)
                charged += gbytes
                if charged > st.peak_memory_bytes:
                    st.peak_memory_bytes = charged
                while lrow is not None and _cmp_tuples(lrow[0], key) == 0:
                    for g in group:
                        out.append(lrow[1] + g)
                        if len(out) >= size:
                            yield out
                            out = []
                    lrow = next(li, None)
                ctx.budget.release(gbytes)
                charged -= gbytes
        if out:
            yield out
    finally:
        ctx.budget.release(charged)


# --------------------------------------------------------------- aggregation


def _agg_add(a, b):
    try:
        return a + b
    except TypeError:
        return float(a) + float(b)  # Decimal meets float


class _Acc:
    __slots__ = ("func", "distinct", "seen", "value", "count")

    def __init__(self, func, distinct):
        self.func = func
        self.distinct = distinct
        self.seen = set() if distinct else None
        self.value = None
        self.count = 0

    def add(self, v) -> int:
        """Feed one value; returns extra bytes newly retained."""
        if self.func == "count" and v is ...:
            self.count += 1  # COUNT(*): every row counts
            return 0
        if v is None:
            return 0
        extra = 0
        if self.distinct:
            if v in self.seen:
                return 0
            self.seen.add(v)
            extra = _value_bytes(v) + 48
        if self.func == "count":
            self.count += 1
        elif self.func == "sum":
            self.value = v if self.value is None else _agg_add(self.value, v)
        elif self.func == "avg":
            self.value = v if self.value is None else _agg_add(self.value, v)
            self.count += 1
        elif self.func == "min":
            if self.value is None or v < self.value:
                self.value = v
        elif self.func == "max":
            if self.value is None or v > self.value:
                self.value = v
        return extra

    def result(self):
        if self.func == "count":
            return self.count
        if self.func == "avg":
            return None if self.count == 0 else float(self.value) / self.count
        return self.value


def _exec_aggregate(node: pn.AggregateNode, ctx: ExecContext, st: OpStats):
    layout = _layout(node.children[0])
    group_fns = [compile_expr(e, layout) for e in node.group_exprs]
    specs = []
    for call in node.agg_calls:
        if call.args and not isinstance(call.args[0], pn.ast.Star):
            arg_fn = compile_expr(call.args[0], layout)
        else:
            arg_fn = None  # COUNT(*)
        specs.append((call.name, call.distinct, arg_fn))

    groups: dict = {}
    if not group_fns:
        # a global aggregate emits exactly one row, even over empty input
        groups[()] = [_Acc(f, d) for f, d, _ in specs]

    charged = 0
    child = _exec_node(node.children[0], ctx)
    try:
        try:
            for batch in child:
                add = 0
                for row in batch:
                    key = tuple(f(row) for f in group_fns)
                    accs = groups.get(key)
                    if accs is None:
                        accs = [_Acc(f, d) for f, d, _ in specs]
                        groups[key] = accs
                        add += _row_bytes(key) + 48 * (len(accs) + 1)
                    for acc, (_, _, arg_fn) in zip(accs, specs):
                        v = ... if arg_fn is None else arg_fn(row)
                        add += acc.add(v)
                if add:
                    ctx.budget.charge(add)
                    charged += add
                    if charged > st.peak_memory_bytes:
                        st.peak_memory_bytes = charged
        finally:
            child.close()

        size = ctx.batch_size
        out = []
        for key, accs in groups.items():
            out.append(key + tuple(a.result() for a in accs))
            if len(out) >= size:
                yield out
                out = []
        if out:
            yield out
    finally:
        ctx.budget.release(charged)


# --------------------------------------------------------------------- sort


def _external_sort(decorated, descending, ctx: ExecContext, st: OpStats):
    """Sort (key, row) pairs; spills runs to disk past the buffer cap.

    Null key parts sort lowest, so ascending order puts nulls first and
    descending order puts them last.
    """
    def cmp(a, b):
        for x, y, d in zip(a[0], b[0], descending):
            c = _cmp_vals(x, y)
            if c:
                return -c if d else c
        return 0

    sort_key = cmp_to_key(cmp)
    cap = ctx.sort_spill_bytes
    buf = []
    buf_bytes = 0
    charged = 0
    runs = []

    def spill():
        nonlocal buf, buf_bytes, charged
        buf.sort(key=sort_key)
        path = ctx.tmp_dir() / f"run{len(runs)}.bin"
        with open(path, "wb") as f:
            for item in buf:
                pickle.dump(item, f, protocol=pickle.HIGHEST_PROTOCOL)
        runs.append(path)
        buf = []
        buf_bytes = 0
        ctx.budget.release(charged)
        charged = 0

    def read_run(path):
        with open(path, "rb") as f:
            while True:
                try:
                    yield pickle.load(f)
                except EOFError:
                    return

    try:
        for item in decorated:
            n = _row_bytes(item[1]) + _row_bytes(item[0])
            if buf and buf_bytes + n > cap:
                spill()
            if ctx.budget.try_charge(n):
                charged += n
            elif buf:
                # out of headroom: flush what we hold rather than raising
                spill()
                if ctx.budget.try_charge(n):
                    charged += n
            if charged > st.peak_memory_bytes:
                st.peak_memory_bytes = charged
            buf.append(item)
            buf_bytes += n
    except BaseException:
        ctx.budget.release(charged)
        raise

    if not runs:
        buf.sort(key=sort_key)
        ctx.budget.release(charged)
        yield from buf
        return

    if buf:
        spill()
    yield from heapq.merge(*(read_run(p) for p in runs), key=sort_key)


def _exec_sort(node: pn.SortNode, ctx: ExecContext, st: OpStats):
    layout = _layout(node.children[0])
    key_fns = [compile_expr(e, layout) for e, _ in node.keys]
    descending = [d for _, d in node.keys]

    def decorated():
        child = _exec_node(node.children[0], ctx)
        try:
            for batch in child:
                for row in batch:
                    yield (tuple(f(row) for f in key_fns), row)
        finally:
            child.close()

    out = []
    size = ctx.batch_size
    for _, row in _external_sort(decorated(), descending, ctx, st):
        out.append(row)
        if len(out) >= size:
            yield out
            out = []
    if out:
        yield out


# ----------------------------------------------------- limit / union / spool


def _exec_limit(node: pn.LimitNode, ctx: ExecContext, st: OpStats):
    n = node.limit
    if n <= 0:
        return  # LIMIT 0 never starts the child; scan counters stay at zero
    child = _exec_node(node.children[0], ctx)
    try:
        remaining = n
        for batch in child:
            if len(batch) >= remaining:
                yield batch[:remaining]
                return
            remaining -= len(batch)
            yield batch
    finally:
        child.close()


def _exec_union(node: pn.UnionAllNode, ctx: ExecContext, st: OpStats):
    for c in node.children:
        child = _exec_node(c, ctx)
        try:
            yield from child
        finally:
            child.close()


def _materialize_spool(spool: pn.SpoolNode, ctx: ExecContext) -> list:
    rows = ctx._spools.get(spool.spool_id)
    if rows is not None:
        return rows
    st = ctx.stats.op(spool)
    rows = []
    charged = 0
    gen = _instrument(st, _exec_node(spool.child, ctx), ctx)
    try:
        try:
            for batch in gen:
                rows.extend(batch)
                add = sum(_row_bytes(r) for r in batch)
                ctx.budget.charge(add)
                charged += add
        except BaseException:
            ctx.budget.release(charged)
            raise
    finally:
        gen.close()
    st.peak_memory_bytes = charged
    # stays charged for the rest of the query; every consumer reads it
    ctx._spools[spool.spool_id] = rows
    return rows


def _exec_spool_scan(node: pn.SpoolScanNode, ctx: ExecContext, st: OpStats):
    rows = _materialize_spool(node.spool, ctx)
    size = ctx.batch_size
    for i in range(0, len(rows), size):
        yield rows[i:i + size]


# ----------------------------------------------------------------- dispatch


_DISPATCH = {
    pn.SCAN: _exec_scan,
    pn.FILTER: _exec_filter,
    pn.PROJECT: _exec_project,
    pn.HASH_JOIN: _exec_hash_join,
    pn.MERGE_JOIN: _exec_merge_join,
    pn.AGGREGATE: _exec_aggregate,
    pn.SORT: _exec_sort,
    pn.LIMIT: _exec_limit,
    pn.UNION_ALL: _exec_union,
    pn.SPOOL_SCAN: _exec_spool_scan,
}


def _exec_node(node: pn.PlanNode, ctx: ExecContext):
    fn = _DISPATCH.get(node.kind)
    if fn is None:
        raise ExecutionError(f"no executor for operator {node.kind}")
    st = ctx.stats.op(node)
    return _instrument(st, fn(node, ctx, st), ctx)


def execute_plan(plan, ctx: ExecContext) -> tuple[list, RuntimeStats]:
    """Run a physical plan to completion; returns (rows, runtime stats).

    ctx.stats is populated as execution proceeds, so the caller can still
    read partial statistics when this raises.
    """
    root = plan.root if isinstance(plan, pn.PhysicalPlan) else plan
    out: list = []
    gen = _exec_node(root, ctx)
    try:
        for batch in gen:
            out.extend(batch)
    finally:
        gen.close()
        ctx.cleanup()
    return out, ctx.stats
