"""Multi-stage plan optimization.

Stages run in a fixed order: (1) predicate pushdown and constant folding
(with storage-handler computation absorption for federated scans),
(2) static partition pruning, (3) materialized-view rewriting by scanned-
rows costing, (4) join algorithm and build-side selection, (5) semijoin
reducer insertion, (6) shared-work merging. Rule loops are capped.

Filter conjuncts are absorbed into a native scan only when the literal
converts to the column's storage representation exactly; anything lossy
stays behind as a residual row predicate so results never change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from decimal import Decimal
from fractions import Fraction

from ..schema import TableDef, TypeKind, timestamp_from_text
from ..sql import ast
from ..storage.read import ColumnPredicate, InPredicate, RangePredicate
from . import nodes as pn
from .build import build_plan
from .estimator import Estimator
from .expr import conjuncts, contains_volatile, fold, ident, replace_subtrees, walk


@dataclass
class PlannerConfig:
    partition_pruning_enabled: bool = True
    mv_rewrite_enabled: bool = True
    semijoin_enabled: bool = True
    shared_work_enabled: bool = True
    semijoin_threshold: float = 100_000.0
    bloom_fpp: float = 0.01
    hash_join_max_build_rows: float = 1_000_000.0
    force_join_algorithm: str | None = None  # "hash" | "merge" | None
    stage_cap: int = 32
    # wired by the engine: fn(resolved node) -> [(mv name, alternative node)]
    mv_candidates: object = None
    # handler name -> StorageHandler, for computation absorption
    handlers: dict = field(default_factory=dict)

    def apply_overlay(self, overlay: dict) -> "PlannerConfig":
        """Return a copy with recognized planner.* overlay keys applied."""
        cfg = replace(self)
        for key, value in overlay.items():
            if not key.startswith("planner."):
                continue
            name = key[len("planner."):]
            if name == "force_join_algorithm":
                cfg.force_join_algorithm = str(value) if value else None
            elif name in ("semijoin_threshold", "hash_join_max_build_rows",
                          "bloom_fpp"):
                setattr(cfg, name, float(value))
            elif name in ("partition_pruning_enabled", "mv_rewrite_enabled",
                          "semijoin_enabled", "shared_work_enabled"):
                setattr(cfg, name, _truthy(value))
        return cfg


def _truthy(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    return bool(v)


# ------------------------------------------------------- storage literals

def _exact_storage(value, ctype) -> tuple[bool, object]:
    """(ok, storage value): ok only when conversion is lossless."""
    if value is None:
        return True, None
    kind = ctype.kind
    if kind is TypeKind.STRING:
        return (True, value) if isinstance(value, str) else (False, None)
    if kind is TypeKind.BOOL:
        return (True, value) if isinstance(value, bool) else (False, None)
    if isinstance(value, str):
        if kind is TypeKind.TIMESTAMP:
            try:
                return True, timestamp_from_text(value)
            except Exception:
                return False, None
        return False, None
    if isinstance(value, bool):
        value = int(value)
    if not isinstance(value, (int, float, Decimal)):
        return False, None
    if isinstance(value, float) and value != value:  # NaN
        return False, None
    if kind in (TypeKind.INT64, TypeKind.TIMESTAMP):
        try:
            f = Fraction(value)
        except (ValueError, OverflowError):
            return False, None
        if f.denominator != 1:
            return False, None
        return True, int(f)
    if kind is TypeKind.FLOAT64:
        f = float(value)
        try:
            if Fraction(f) != Fraction(value):
                return False, None
        except (ValueError, OverflowError):
            return False, None
        return True, f
    if kind is TypeKind.DECIMAL:
        try:
            scaled = Fraction(value) * (10 ** (ctype.scale or 0))
        except (ValueError, OverflowError):
            return False, None
        if scaled.denominator != 1:
            return False, None
        return True, int(scaled)
    return False, None


def _conj_to_pushed(e: ast.Expr, scan: pn.ScanNode):
    """Translate one conjunct into a storage predicate, or None."""
    table = scan.table
    if table is None:
        return None

    def col_of(x) -> str | None:
        if (isinstance(x, ast.ColumnRef) and x.qualifier == scan.binding
                and table.has_column(x.name)):
            return x.name
        return None

    flip = {"<": ">", "<=": ">=", ">": "<", ">=": "<=", "=": "=", "!=": "!="}
    if isinstance(e, ast.BinaryOp) and e.op in flip:
        lhs, rhs, op = e.left, e.right, e.op
        if isinstance(lhs, ast.Literal) and col_of(rhs):
            lhs, rhs, op = rhs, lhs, flip[op]
        col = col_of(lhs)
        if col and isinstance(rhs, ast.Literal):
            ok, v = _exact_storage(rhs.value, table.column(col).ctype)
            if ok:
                return ColumnPredicate(col, op, v)
        return None
    if isinstance(e, ast.InExpr) and not e.negated:
        col = col_of(e.operand)
        if col and all(isinstance(i, ast.Literal) for i in e.items):
            ctype = table.column(col).ctype
            values = []
            for i in e.items:
                if i.value is None:
                    continue  # NULL in an IN list never matches
                ok, v = _exact_storage(i.value, ctype)
                if not ok:
                    return None
                values.append(v)
            return InPredicate(col, frozenset(values))
        return None
    if isinstance(e, ast.BetweenExpr) and not e.negated:
        col = col_of(e.operand)
        if (col and isinstance(e.low, ast.Literal)
                and isinstance(e.high, ast.Literal)
                and e.low.value is not None and e.high.value is not None):
            ctype = table.column(col).ctype
            ok1, lo = _exact_storage(e.low.value, ctype)
            ok2, hi = _exact_storage(e.high.value, ctype)
            if ok1 and ok2:
                return RangePredicate(col, lo, hi)
        return None
    return None


# ------------------------------------------------ stage 1: pushdown + fold

def _idents_of(node: pn.PlanNode) -> set[str]:
    return {c.ident for c in node.schema}


def _push(node: pn.PlanNode, pending: list[ast.Expr], config) -> pn.PlanNode:
    """Push pending conjuncts as deep as possible; wrap leftovers here."""

    def wrap(n: pn.PlanNode, conj: list[ast.Expr]) -> pn.PlanNode:
        conj = [c for c in conj if not (isinstance(c, ast.Literal) and c.value is True)]
        if not conj:
            return n
        return pn.FilterNode(children=(n,), schema=n.schema, conjuncts=tuple(conj))

    pending = [fold(c) for c in pending]
    pending = [c for c in pending
               if not (isinstance(c, ast.Literal) and c.value is True)]

    if isinstance(node, pn.FilterNode):
        folded = [fold(c) for c in node.conjuncts]
        return _push(node.children[0], pending + folded, config)

    if isinstance(node, pn.ProjectNode):
        mapping = {c.ident: e for c, e in zip(node.schema, node.exprs)}
        down, keep = [], []
        for c in pending:
            refs = {ident(n) for n in walk(c) if isinstance(n, ast.ColumnRef)}
            if refs <= set(mapping):
                down.append(replace_subtrees(
                    c, {ast.ColumnRef(*_split(r)): mapping[r] for r in refs}))
            else:
                keep.append(c)
        child = _push(node.children[0], down, config)
        return wrap(replace(node, children=(child,)), keep)

    if isinstance(node, pn.ScanNode):
        if node.table is not None and not node.table.is_native:
            return wrap(replace(node), pending)
        pushed = list(node.pushed)
        residual = [fold(e) for e in node.residual]
        for c in pending:
            p = _conj_to_pushed(c, node)
            if p is not None:
                pushed.append(p)
            else:
                residual.append(c)
        residual = [e for e in residual
                    if not (isinstance(e, ast.Literal) and e.value is True)]
        return replace(node, pushed=tuple(pushed), residual=tuple(residual))

    if isinstance(node, (pn.HashJoinNode, pn.MergeJoinNode)):
        left, right = node.children
        lids, rids = _idents_of(left), _idents_of(right)
        to_l, to_r, keep = [], [], []
        for c in pending:
            refs = {ident(n) for n in walk(c) if isinstance(n, ast.ColumnRef)}
            if refs <= lids:
                to_l.append(c)
            elif refs <= rids:
                to_r.append(c)
            else:
                keep.append(c)
        new = replace(node, children=(
            _push(left, to_l, config), _push(right, to_r, config)))
        return wrap(new, keep)

    if isinstance(node, pn.AggregateNode):
        mapping = {f"_g{i}": g for i, g in enumerate(node.group_exprs)}
        down, keep = [], []
        for c in pending:
            refs = {ident(n) for n in walk(c) if isinstance(n, ast.ColumnRef)}
            if refs <= set(mapping):
                down.append(replace_subtrees(
                    c, {ast.ColumnRef(None, r): mapping[r] for r in refs}))
            else:
                keep.append(c)
        child = _push(node.children[0], down, config)
        return wrap(replace(node, children=(child,)), keep)

    if isinstance(node, pn.UnionAllNode):
        kids = tuple(_push(c, list(pending), config) for c in node.children)
        return replace(node, children=kids)

    if isinstance(node, pn.SortNode):
        child = _push(node.children[0], pending, config)
        return replace(node, children=(child,))

    if isinstance(node, pn.LimitNode):
        child = _push(node.children[0], [], config)
        return wrap(replace(node, children=(child,)), pending)

    kids = tuple(_push(c, [], config) for c in node.children)
    return wrap(replace(node, children=kids), pending)


def _split(r: str) -> tuple[str | None, str]:
    if "." in r:
        q, n = r.split(".", 1)
        return q, n
    return None, r


_ABSORBABLE = {pn.FILTER, pn.PROJECT, pn.AGGREGATE, pn.LIMIT}


def _absorb_handler(node: pn.PlanNode, config) -> pn.PlanNode | None:
    """Fold a chain of operators above an external scan into the handler."""
    chain: list[pn.PlanNode] = []
    cur = node
    while cur.kind in _ABSORBABLE and len(cur.children) == 1:
        chain.append(cur)
        cur = cur.children[0]
    if not isinstance(cur, pn.ScanNode) or cur.table is None or cur.table.is_native:
        return None
    handler = config.handlers.get(cur.table.handler)
    caps = set(getattr(handler, "capabilities", ())) if handler else set()
    absorbed = list(cur.absorbed)
    ops = list(cur.pushed_ops)
    taken = 0
    for op in reversed(chain):  # bottom-most first
        name = {pn.FILTER: "FILTER", pn.PROJECT: "PROJECT",
                pn.AGGREGATE: "AGGREGATE", pn.LIMIT: "LIMIT"}[op.kind]
        if name not in caps:
            break
        absorbed.append(op)
        ops.append(name)
        taken += 1
    if not taken:
        return None
    from .explain import describe_pushed
    scan = replace(cur, absorbed=tuple(absorbed), pushed_ops=tuple(ops),
                   schema=absorbed[-1].schema)
    scan.descriptor = describe_pushed(scan)
    rest = chain[:len(chain) - taken]
    out: pn.PlanNode = scan
    for op in reversed(rest):
        out = replace(op, children=(out,))
    return out


def _absorb_pass(node: pn.PlanNode, config) -> pn.PlanNode:
    """Top-down: absorb each maximal operator chain over an external scan."""
    done = _absorb_handler(node, config)
    if done is not None:
        return done
    kids = tuple(_absorb_pass(c, config) for c in node.children)
    return replace(node, children=kids)


# -------------------------------------------- stage 2: partition pruning

def _prune_partitions(node: pn.PlanNode, catalog) -> pn.PlanNode:
    if isinstance(node, pn.ScanNode):
        t = node.table
        if (t is None or not t.is_native or not t.is_partitioned
                or node.partitions is not None):
            return node
        pnames = t.partition_column_names()
        preds = [p for p in node.pushed if p.column in pnames]
        if not preds:
            return node
        keep = []
        for pkey in catalog.partitions(t.qualified_name):
            pvals = dict(zip(pnames, pkey))
            if all(p.row_matches(pvals[p.column]) for p in preds):
                keep.append(pkey)
        return replace(node, partitions=tuple(keep))
    kids = tuple(_prune_partitions(c, catalog) for c in node.children)
    return replace(node, children=kids)


# ------------------------------------------ stage 4: join algorithm choice

def _choose_joins(node: pn.PlanNode, config) -> pn.PlanNode:
    kids = tuple(_choose_joins(c, config) for c in node.children)
    node = replace(node, children=kids)
    if isinstance(node, (pn.HashJoinNode, pn.MergeJoinNode)):
        left, right = node.children
        forced = config.force_join_algorithm
        want_merge = False
        if node.left_keys:
            if forced == "merge":
                want_merge = True
            elif forced != "hash":
                want_merge = (min(left.estimated_rows, right.estimated_rows)
                              > config.hash_join_max_build_rows)
        if want_merge:
            return pn.MergeJoinNode(
                children=(left, right), schema=node.schema,
                estimated_rows=node.estimated_rows,
                left_keys=node.left_keys, right_keys=node.right_keys)
        build = "left" if left.estimated_rows < right.estimated_rows else "right"
        return pn.HashJoinNode(
            children=(left, right), schema=node.schema,
            estimated_rows=node.estimated_rows,
            left_keys=node.left_keys, right_keys=node.right_keys,
            build_side=build)
    return node


# --------------------------------------- stage 5: semijoin reducer insert

def _is_filtered(node: pn.PlanNode) -> bool:
    # attached reducers do not count: the gate asks for a genuinely
    # filtered subexpression, not one that merely got reduced itself
    for n in _tree_walk(node):
        if isinstance(n, pn.FilterNode):
            return True
        if isinstance(n, pn.ScanNode) and (n.pushed or n.residual):
            return True
    return False


def _find_scan(node: pn.PlanNode, binding: str) -> pn.ScanNode | None:
    for n in node.walk():
        if isinstance(n, pn.ScanNode) and n.binding == binding:
            return n
    return None


def _insert_reducers(root: pn.PlanNode, config) -> None:
    for node in root.walk():
        if not isinstance(node, (pn.HashJoinNode, pn.MergeJoinNode)):
            continue
        if not node.left_keys:
            continue
        left, right = node.children
        candidates = []
        for source, target, skeys, tkeys in (
                (left, right, node.left_keys, node.right_keys),
                (right, left, node.right_keys, node.left_keys)):
            if (source.estimated_rows <= config.semijoin_threshold
                    and _is_filtered(source)):
                candidates.append((source.estimated_rows, source, target,
                                   skeys, tkeys))
        if not candidates:
            continue
        # one direction per join; prefer the smaller source
        candidates.sort(key=lambda c: c[0])
        _, source, target, skeys, tkeys = candidates[0]
        for skey, tkey in zip(skeys, tkeys):
            if not isinstance(tkey, ast.ColumnRef) or tkey.qualifier is None:
                continue
            scan = _find_scan(target, tkey.qualifier)
            if scan is None or scan.table is None or not scan.table.is_native:
                continue
            if not scan.table.has_column(tkey.name):
                continue
            variant = ("partition"
                       if tkey.name in scan.table.partition_column_names()
                       else "index")
            red = pn.ReducerNode(
                children=(source,), source_ident=ident(skey),
                target_column=tkey.name, variant=variant,
                estimated_rows=source.estimated_rows)
            scan.reducers = scan.reducers + (red,)


# --------------------------------------------- stage 6: shared-work merge

def _tree_walk(node: pn.PlanNode):
    """Walk the executable tree without descending into reducer sources."""
    yield node
    for c in node.children:
        yield from _tree_walk(c)


def _node_exprs(n: pn.PlanNode):
    if isinstance(n, pn.ScanNode):
        return n.residual
    if isinstance(n, pn.FilterNode):
        return n.conjuncts
    if isinstance(n, pn.ProjectNode):
        return n.exprs
    if isinstance(n, (pn.HashJoinNode, pn.MergeJoinNode)):
        return n.left_keys + n.right_keys
    if isinstance(n, pn.AggregateNode):
        return n.group_exprs + n.agg_calls
    if isinstance(n, pn.SortNode):
        return tuple(e for e, _ in n.keys)
    return ()


def _mergeable(node: pn.PlanNode) -> bool:
    for n in _tree_walk(node):
        if n.kind == pn.SPOOL_SCAN:
            return False
        if any(contains_volatile(e) for e in _node_exprs(n)):
            return False
    return True


def _shared_work(root: pn.PlanNode) -> tuple[pn.PlanNode, tuple[pn.SpoolNode, ...]]:
    counts: dict[str, int] = {}
    for n in _tree_walk(root):
        counts[n.merge_key()] = counts.get(n.merge_key(), 0) + 1
    if not any(c >= 2 for c in counts.values()):
        return root, ()
    spools: dict[str, pn.SpoolNode] = {}
    order: list[str] = []

    def rewrite(n: pn.PlanNode, is_root: bool) -> pn.PlanNode:
        key = n.merge_key()
        if not is_root and counts.get(key, 0) >= 2 and _mergeable(n):
            if key not in spools:
                sid = f"s{len(order)}"
                order.append(key)
                # merging c occurrences keeps one copy: the other c-1
                # disappear, so every key nested inside stops counting
                # them and only maximal subtrees get their own spools
                extra = counts[key] - 1
                for inner in _tree_walk(n):
                    if inner is not n:
                        counts[inner.merge_key()] -= extra
                spool = pn.SpoolNode(children=(n,), schema=n.schema,
                                     spool_id=sid)
                spools[key] = spool
                spool.children = (rewrite_children(n),)
            spool = spools[key]
            return pn.SpoolScanNode(schema=n.schema, spool_id=spool.spool_id,
                                    spool=spool,
                                    estimated_rows=n.estimated_rows)
        return rewrite_children(n)

    def rewrite_children(n: pn.PlanNode) -> pn.PlanNode:
        return replace(n, children=tuple(rewrite(c, False) for c in n.children))

    new_root = rewrite(root, True)
    return new_root, tuple(spools[k] for k in order)


# ----------------------------------------------------------------- driver

def _run_stage1(plan: pn.PlanNode, config: PlannerConfig) -> pn.PlanNode:
    prev = None
    for _ in range(config.stage_cap):
        plan = _push(plan, [], config)
        sig = str(plan._sig(physical=True))
        if sig == prev:
            break
        prev = sig
    return plan


def _scanned_rows(plan: pn.PlanNode) -> float:
    return sum(n.estimated_rows for n in plan.walk() if isinstance(n, pn.ScanNode))


def optimize(resolved_node, catalog, wil_of, config: PlannerConfig | None = None,
             overrides: dict[str, float] | None = None) -> pn.PhysicalPlan:
    """Full pipeline: build the initial plan and apply all stages."""
    config = config or PlannerConfig()
    est = Estimator(catalog, overrides)

    def prepare(node) -> pn.PlanNode:
        plan = build_plan(node, catalog, wil_of)
        plan = _run_stage1(plan, config)
        if config.handlers:
            plan = _absorb_pass(plan, config)
        if config.partition_pruning_enabled:
            plan = _prune_partitions(plan, catalog)
        est.annotate(plan)
        return plan

    plan = prepare(resolved_node)

    if config.mv_rewrite_enabled and config.mv_candidates is not None:
        best, best_cost = plan, _scanned_rows(plan)
        for _, alternative in config.mv_candidates(resolved_node):
            try:
                cand = prepare(alternative)
            except Exception:
                continue  # a candidate that fails to plan is simply skipped
            cost = _scanned_rows(cand)
            if cost < best_cost:
                best, best_cost = cand, cost
        plan = best

    plan = _choose_joins(plan, config)
    if config.semijoin_enabled:
        _insert_reducers(plan, config)
    spools: tuple[pn.SpoolNode, ...] = ()
    if config.shared_work_enabled:
        plan, spools = _shared_work(plan)
    est.annotate(plan)
    for s in spools:
        est.annotate(s)
    return pn.PhysicalPlan(plan, spools)


def wil_binder(txn_manager, snapshot):
    """Standard wil_of implementation over a transaction manager."""
    def wil_of(table: TableDef):
        return txn_manager.specialize(snapshot, table.qualified_name)
    return wil_of
