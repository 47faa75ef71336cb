"""Materialized views: containment-based rewriting and incremental rebuild.

A view definition is canonicalized into an SPJA form (tables, equijoin set,
per-column range/set constraints, grouping columns, aggregate list). Query
containment is decided per column with a small interval algebra; a query that
is wider than the view on exactly one range-constrained column still rewrites
as the union of the view and a recomputed residual slice.

Rebuilds read each source table twice under write-id arithmetic: once as of
the snapshot recorded at the last build, once under the current snapshot.
Insert-only deltas merge into the stored rows; any sign of applied deletes
falls back to a full recompute.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal

from .catalog import Catalog, MatViewRecord
from .errors import MatViewError, RebuildInProgress
from .executor import ExecContext, execute_plan
from .plan.expr import (
    AGGREGATE_FUNCS,
    collect_aggregates,
    conjoin,
    conjuncts,
    is_aggregate_call,
    replace_subtrees,
    _children,
)
from .plan.nodes import ScanNode
from .plan.optimizer import PlannerConfig, optimize, wil_binder
from .plan.resolve import resolve_query
from .schema import Column, TableDef, TypeKind, coerce_value
from .sql import ast, parse_statement, unparse
from .stats import ColumnStats
from .storage.layout import DirKind, list_acid_dirs, partition_path
from .storage.read import DirectIO, ScanRequest, snapshot_read
from .storage.write import TxnWriter
from .txn import WriteIdList

__all__ = [
    "AggSpec",
    "ColConstraint",
    "ContainmentResult",
    "MatView",
    "RebuildReport",
    "SpjaForm",
    "candidate_source",
    "check_containment",
    "create_materialized_view",
    "drop_materialized_view",
    "extract_spja",
    "is_fresh",
    "load_view",
    "rebuild",
]

_CMP_OPS = frozenset({"=", "!=", "<", "<=", ">", ">="})
_FLIP = {"<": ">", "<=": ">=", ">": "<", ">=": "<=", "=": "=", "!=": "!="}


# --------------------------------------------------------------- SPJA form


@dataclass(frozen=True)
class AggSpec:
    """One aggregate call, canonicalized: function name plus argument column.

    arg is the canonical column ident, or None for count(*).
    """

    func: str
    arg: str | None


@dataclass(frozen=True)
class ColConstraint:
    """Conjunction of range/set predicates on a single column.

    lo/hi of None mean unbounded. inset of None means no IN/equality
    constraint; otherwise the value must be in the set. neq collects
    excluded values.
    """

    lo: object = None
    lo_strict: bool = False
    hi: object = None
    hi_strict: bool = False
    inset: frozenset | None = None
    neq: frozenset = frozenset()

    def admits(self, v) -> bool:
        if v is None:
            return False
        if self.inset is not None and v not in self.inset:
            return False
        if v in self.neq:
            return False
        if self.lo is not None:
            if v < self.lo or (v == self.lo and self.lo_strict):
                return False
        if self.hi is not None:
            if v > self.hi or (v == self.hi and self.hi_strict):
                return False
        return True


_ANY = ColConstraint()


def _and_constraint(a: ColConstraint, b: ColConstraint) -> ColConstraint:
    lo, lo_s = a.lo, a.lo_strict
    if b.lo is not None and (lo is None or b.lo > lo or (b.lo == lo and b.lo_strict)):
        lo, lo_s = b.lo, b.lo_strict
    hi, hi_s = a.hi, a.hi_strict
    if b.hi is not None and (hi is None or b.hi < hi or (b.hi == hi and b.hi_strict)):
        hi, hi_s = b.hi, b.hi_strict
    if a.inset is None:
        inset = b.inset
    elif b.inset is None:
        inset = a.inset
    else:
        inset = a.inset & b.inset
    return ColConstraint(lo, lo_s, hi, hi_s, inset, a.neq | b.neq)


def _implies(a: ColConstraint, b: ColConstraint) -> bool:
    """True when every value admitted by a is admitted by b.

    Exact for finite a (inset present); conservative otherwise.
    """
    if b == _ANY:
        return True
    if a.inset is not None:
        return all(b.admits(v) for v in a.inset if a.admits(v))
    if b.inset is not None:
        return False
    if b.lo is not None:
        if a.lo is None:
            return False
        if a.lo < b.lo or (a.lo == b.lo and b.lo_strict and not a.lo_strict):
            return False
    if b.hi is not None:
        if a.hi is None:
            return False
        if a.hi > b.hi or (a.hi == b.hi and b.hi_strict and not a.hi_strict):
            return False
    # every value b excludes must already be unreachable under a
    for v in b.neq:
        if v in a.neq:
            continue
        if a.admits(v):
            return False
    return True


def _range_only(c: ColConstraint) -> bool:
    return c.inset is None and not c.neq


def _subtract_range(q: ColConstraint, m: ColConstraint) -> list[ColConstraint]:
    """Pieces of q's interval not covered by m's. Both must be range-only."""
    pieces = []
    if m.lo is not None:
        covered_left = q.lo is not None and (
            q.lo > m.lo or (q.lo == m.lo and (q.lo_strict or not m.lo_strict)))
        if not covered_left:
            pieces.append(ColConstraint(
                lo=q.lo, lo_strict=q.lo_strict, hi=m.lo, hi_strict=not m.lo_strict))
    if m.hi is not None:
        covered_right = q.hi is not None and (
            q.hi < m.hi or (q.hi == m.hi and (q.hi_strict or not m.hi_strict)))
        if not covered_right:
            pieces.append(ColConstraint(
                lo=m.hi, lo_strict=not m.hi_strict, hi=q.hi, hi_strict=q.hi_strict))
    return pieces


@dataclass
class SpjaForm:
    tables: tuple[str, ...]  # sorted qualified names
    join_eqs: frozenset  # frozenset of frozenset({ident, ident}) pairs
    constraints: dict  # canonical ident -> ColConstraint
    conjunct_nodes: dict  # canonical ident -> tuple of original conjunct exprs
    group_cols: tuple[str, ...]  # canonical, in group-by order
    group_exprs: tuple  # the resolved group-by ColumnRefs, same order
    aggs: tuple[AggSpec, ...]  # first-use order, deduplicated
    agg_nodes: dict  # AggSpec -> tuple of structural FuncCall nodes
    all_ref_cols: frozenset  # idents referenced outside aggregate calls
    col_refs: dict  # canonical ident -> one representative ColumnRef

    @property
    def grouped(self) -> bool:
        return bool(self.group_cols or self.aggs)


def _canon(ref: ast.ColumnRef, binding_map: dict) -> str | None:
    if ref.qualifier is None or ref.qualifier not in binding_map:
        return None
    return f"{binding_map[ref.qualifier]}.{ref.name}"


def _literal_value(e: ast.Expr):
    if isinstance(e, ast.Literal) and e.value is not None:
        return e.value
    return None


def _classify_conjunct(c: ast.Expr, binding_map: dict):
    """Classify one WHERE conjunct.

    Returns ("join", frozenset pair), ("col", ident, ColConstraint, ref),
    or None when the conjunct is outside the canonical vocabulary.
    """
    if isinstance(c, ast.BinaryOp) and c.op in _CMP_OPS:
        l, r = c.left, c.right
        if isinstance(l, ast.ColumnRef) and isinstance(r, ast.ColumnRef):
            if c.op != "=":
                return None
            a, b = _canon(l, binding_map), _canon(r, binding_map)
            if a is None or b is None or a == b:
                return None
            return ("join", frozenset((a, b)))
        op = c.op
        if isinstance(r, ast.ColumnRef) and not isinstance(l, ast.ColumnRef):
            l, r, op = r, l, _FLIP[op]
        if not isinstance(l, ast.ColumnRef):
            return None
        ident = _canon(l, binding_map)
        v = _literal_value(r)
        if ident is None or v is None:
            return None
        if op == "=":
            con = ColConstraint(inset=frozenset((v,)))
        elif op == "!=":
            con = ColConstraint(neq=frozenset((v,)))
        elif op == "<":
            con = ColConstraint(hi=v, hi_strict=True)
        elif op == "<=":
            con = ColConstraint(hi=v)
        elif op == ">":
            con = ColConstraint(lo=v, lo_strict=True)
        else:
            con = ColConstraint(lo=v)
        return ("col", ident, con, l)
    if isinstance(c, ast.InExpr) and isinstance(c.operand, ast.ColumnRef):
        ident = _canon(c.operand, binding_map)
        if ident is None:
            return None
        vals = [_literal_value(i) for i in c.items]
        if any(v is None for v in vals):
            return None
        con = (ColConstraint(neq=frozenset(vals)) if c.negated
               else ColConstraint(inset=frozenset(vals)))
        return ("col", ident, con, c.operand)
    if isinstance(c, ast.BetweenExpr) and isinstance(c.operand, ast.ColumnRef):
        if c.negated:
            return None
        ident = _canon(c.operand, binding_map)
        lo, hi = _literal_value(c.low), _literal_value(c.high)
        if ident is None or lo is None or hi is None:
            return None
        return ("col", ident, ColConstraint(lo=lo, hi=hi), c.operand)
    return None


def _refs_outside_aggs(e: ast.Expr, acc: set, refs: dict, binding_map: dict) -> None:
    if is_aggregate_call(e):
        return
    if isinstance(e, ast.ColumnRef):
        ident = _canon(e, binding_map)
        if ident is not None:
            acc.add(ident)
            refs.setdefault(ident, e)
        return
    for ch in _children(e):
        _refs_outside_aggs(ch, acc, refs, binding_map)


def extract_spja(node, database: str = "default") -> SpjaForm | None:
    """Canonicalize a resolved SELECT, or None when it falls outside SPJA."""
    if not isinstance(node, ast.Select) or node.distinct:
        return None
    binding_map: dict[str, str] = {}
    qnames: list[str] = []
    for ref in node.from_refs:
        if not isinstance(ref, ast.TableRef):
            return None
        q = f"{ref.database or database}.{ref.name}"
        if q in qnames:
            return None  # self-joins are out of scope for containment
        qnames.append(q)
        binding_map[ref.binding] = q

    join_eqs: set = set()
    constraints: dict[str, ColConstraint] = {}
    conjunct_nodes: dict[str, list] = {}
    col_refs: dict[str, ast.ColumnRef] = {}
    for c in conjuncts(node.where):
        shape = _classify_conjunct(c, binding_map)
        if shape is None:
            return None
        if shape[0] == "join":
            join_eqs.add(shape[1])
        else:
            _, ident, con, ref = shape
            constraints[ident] = _and_constraint(constraints.get(ident, _ANY), con)
            conjunct_nodes.setdefault(ident, []).append(c)
            col_refs.setdefault(ident, ref)

    group_cols: list[str] = []
    group_exprs: list = []
    for g in node.group_by:
        if not isinstance(g, ast.ColumnRef):
            return None
        ident = _canon(g, binding_map)
        if ident is None:
            return None
        group_cols.append(ident)
        group_exprs.append(g)
        col_refs.setdefault(ident, g)

    aggs: list[AggSpec] = []
    agg_nodes: dict[AggSpec, list] = {}
    all_refs: set = set()
    scope_exprs = [it.expr for it in node.items]
    if node.having is not None:
        scope_exprs.append(node.having)
    scope_exprs.extend(e for e, _ in node.order_by)
    for e in scope_exprs:
        _refs_outside_aggs(e, all_refs, col_refs, binding_map)
        for call in collect_aggregates(e):
            if call.distinct or call.name not in AGGREGATE_FUNCS:
                return None
            if len(call.args) != 1:
                return None
            arg = call.args[0]
            if isinstance(arg, ast.Star):
                if call.name != "count":
                    return None
                spec = AggSpec("count", None)
            elif isinstance(arg, ast.ColumnRef):
                ident = _canon(arg, binding_map)
                if ident is None:
                    return None
                spec = AggSpec(call.name, ident)
                col_refs.setdefault(ident, arg)
            else:
                return None
            if spec not in agg_nodes:
                aggs.append(spec)
                agg_nodes[spec] = []
            if call not in agg_nodes[spec]:
                agg_nodes[spec].append(call)

    return SpjaForm(
        tables=tuple(sorted(qnames)),
        join_eqs=frozenset(join_eqs),
        constraints=constraints,
        conjunct_nodes={k: tuple(v) for k, v in conjunct_nodes.items()},
        group_cols=tuple(group_cols),
        group_exprs=tuple(group_exprs),
        aggs=tuple(aggs),
        agg_nodes={k: tuple(v) for k, v in agg_nodes.items()},
        all_ref_cols=frozenset(all_refs),
        col_refs=col_refs,
    )


# ------------------------------------------------------------ view loading


@dataclass
class MatView:
    """A registered view with its canonical form and column mappings."""

    record: MatViewRecord
    table: TableDef
    node: ast.Select  # resolved definition
    form: SpjaForm
    group_cols: dict  # canonical ident -> view column name
    agg_cols: dict  # AggSpec -> view column name
    out_specs: tuple  # positional ("group", ident) | ("agg", AggSpec)
    is_spja: bool


def _classify_items(node: ast.Select, output, form: SpjaForm, database: str):
    group_cols: dict[str, str] = {}
    agg_cols: dict[AggSpec, str] = {}
    out_specs: list = []
    binding_map = {r.binding: f"{r.database or database}.{r.name}"
                   for r in node.from_refs}
    for i, item in enumerate(node.items):
        name = output[i][0]
        e = item.expr
        if isinstance(e, ast.ColumnRef):
            ident = _canon(e, binding_map)
            if ident is None:
                raise MatViewError(f"unresolvable column in view item {name}")
            group_cols[ident] = name
            out_specs.append(("group", ident))
            continue
        if is_aggregate_call(e):
            arg = e.args[0]
            if isinstance(arg, ast.Star):
                spec = AggSpec("count", None)
            elif isinstance(arg, ast.ColumnRef):
                spec = AggSpec(e.name, _canon(arg, binding_map))
            else:
                raise MatViewError(
                    "view aggregates must take a single column argument")
            agg_cols[spec] = name
            out_specs.append(("agg", spec))
            continue
        raise MatViewError(
            "view select items must be plain columns or aggregate calls")
    return group_cols, agg_cols, tuple(out_specs)


def _validate_definition(res, form: SpjaForm | None, database: str):
    node = res.node
    if not isinstance(node, ast.Select):
        raise MatViewError("view definition must be a single SELECT")
    if res.volatile:
        raise MatViewError("view definition may not call volatile functions")
    if node.order_by or node.limit is not None:
        raise MatViewError("view definition may not use ORDER BY or LIMIT")
    if node.having is not None:
        raise MatViewError("view definition may not use HAVING")
    if node.distinct:
        raise MatViewError("view definition may not use DISTINCT")
    if form is None:
        raise MatViewError(
            "view definition must be a select-project-join-aggregate query "
            "with simple comparison predicates")
    for t in res.tables:
        if t.handler != "native":
            raise MatViewError(f"view source {t.qualified_name} is external")
    group_cols, agg_cols, out_specs = _classify_items(
        node, res.output, form, database)
    for ident in form.group_cols:
        if ident not in group_cols:
            raise MatViewError(
                "every grouping column must appear in the view select list")
    for spec in agg_cols:
        if spec.func == "avg":
            have_sum = AggSpec("sum", spec.arg) in agg_cols
            have_cnt = AggSpec("count", spec.arg) in agg_cols
            if not (have_sum and have_cnt):
                raise MatViewError(
                    "avg in a view requires sum and count of the same column "
                    "alongside it")
    for name, ctype in res.output:
        if ctype is None:
            raise MatViewError(f"view column {name} has no type")
    return group_cols, agg_cols, out_specs


def load_view(catalog: Catalog, record: MatViewRecord) -> MatView:
    database, _, _ = record.name.partition(".")
    stmt = parse_statement(record.definition_text)
    res = resolve_query(stmt, catalog, database)
    form = extract_spja(res.node, database)
    group_cols, agg_cols, out_specs = _validate_definition(res, form, database)
    table = catalog.get_table(*record.name.split(".", 1))
    return MatView(
        record=record, table=table, node=res.node, form=form,
        group_cols=group_cols, agg_cols=agg_cols, out_specs=out_specs,
        is_spja=bool(form.aggs or form.group_cols))


# ------------------------------------------------------------- containment


@dataclass
class ContainmentResult:
    kind: str  # FULL | PARTIAL | NONE
    rollup: dict = field(default_factory=dict)  # AggSpec -> rollup entry
    compensation_cols: tuple[str, ...] = ()
    residual_col: str | None = None
    residual: ColConstraint | None = None


def _map_agg(spec: AggSpec, view: MatView):
    """Rollup entry computing spec from view columns, or None."""
    if not view.is_spja:
        if spec.arg is None:
            return ("direct", spec.func, None)
        if spec.arg in view.group_cols:
            return ("direct", spec.func, spec.arg)
        return None
    if spec.func == "sum":
        c = view.agg_cols.get(spec)
        return ("sum", c) if c else None
    if spec.func == "count":
        c = view.agg_cols.get(spec)
        return ("cnt", c) if c else None
    if spec.func in ("min", "max"):
        c = view.agg_cols.get(spec)
        if c:
            return (spec.func, c)
        # min/max are insensitive to multiplicity, so a grouping column
        # of the view carries them exactly
        if spec.arg in view.group_cols:
            return (spec.func, view.group_cols[spec.arg])
        return None
    if spec.func == "avg":
        s = view.agg_cols.get(AggSpec("sum", spec.arg))
        c = view.agg_cols.get(AggSpec("count", spec.arg))
        if s and c:
            return ("avg", s, c)
        return None
    return None


def check_containment(q: SpjaForm, view: MatView) -> ContainmentResult:
    """Decide whether the view can answer the query, and how."""
    mv = view.form
    none = ContainmentResult("NONE")
    if set(q.tables) != set(mv.tables):
        return none
    if q.join_eqs != mv.join_eqs:
        return none
    available = set(view.group_cols)
    if not set(q.group_cols) <= available:
        return none
    if not q.all_ref_cols <= available:
        return none
    if view.is_spja and not q.grouped:
        # the view lost row multiplicity; a bare SPJ query needs it back
        return none
    rollup: dict[AggSpec, tuple] = {}
    for spec in q.aggs:
        entry = _map_agg(spec, view)
        if entry is None:
            return none
        rollup[spec] = entry

    comp: list[str] = []
    wide: list[str] = []
    for col in sorted(set(q.constraints) | set(mv.constraints)):
        qc = q.constraints.get(col, _ANY)
        mc = mv.constraints.get(col, _ANY)
        if _implies(qc, mc):
            if not _implies(mc, qc):
                if col not in available:
                    return none  # filter cannot be reapplied over view rows
                comp.append(col)
        elif _implies(mc, qc):
            wide.append(col)
        else:
            return none
    if not wide:
        return ContainmentResult("FULL", rollup, tuple(comp))
    if len(wide) == 1:
        col = wide[0]
        qc = q.constraints.get(col, _ANY)
        mc = mv.constraints.get(col, _ANY)
        if _range_only(qc) and _range_only(mc):
            pieces = _subtract_range(qc, mc)
            if len(pieces) == 1:
                return ContainmentResult(
                    "PARTIAL", rollup, tuple(comp), col, pieces[0])
    return none


# ----------------------------------------------------------- rewrite build


def _mv_from_ref(view: MatView) -> ast.TableRef:
    return ast.TableRef(view.table.database, view.table.name, None)


def _mvref(view: MatView, col: str) -> ast.ColumnRef:
    return ast.ColumnRef(view.table.name, col)


def _replace(e: ast.Expr, mapping: dict) -> ast.Expr:
    return replace_subtrees(e, mapping)


def _comp_conjuncts(q: SpjaForm, cols, target_of) -> list:
    out = []
    for col in cols:
        mapping = {q.col_refs[col]: target_of(col)}
        for c in q.conjunct_nodes[col]:
            out.append(_replace(c, mapping))
    return out


def _residual_conjuncts(ref: ast.ColumnRef, piece: ColConstraint) -> list:
    out = []
    if piece.lo is not None:
        op = ">" if piece.lo_strict else ">="
        out.append(ast.BinaryOp(op, ref, ast.Literal(piece.lo)))
    if piece.hi is not None:
        op = "<" if piece.hi_strict else "<="
        out.append(ast.BinaryOp(op, ref, ast.Literal(piece.hi)))
    return out


def _rollup_expr(entry, ref_of, global_agg: bool) -> ast.Expr:
    kind = entry[0]
    if kind == "direct":
        _, func, arg = entry
        argexpr = ast.Star() if arg is None else ref_of(("direct", arg))
        return ast.FuncCall(func, (argexpr,))
    if kind == "sum":
        return ast.FuncCall("sum", (ref_of(entry),))
    if kind == "cnt":
        e = ast.FuncCall("sum", (ref_of(entry),))
        if global_agg:
            # an empty global count is 0, but SUM over nothing is NULL
            return ast.FuncCall("coalesce", (e, ast.Literal(0)))
        return e
    if kind in ("min", "max"):
        return ast.FuncCall(kind, (ref_of(entry),))
    _, s, c = entry
    return ast.BinaryOp(
        "/",
        ast.FuncCall("sum", (ref_of(("sum", s)),)),
        ast.FuncCall("sum", (ref_of(("cnt", c)),)))


def _output_aliases(node: ast.Select) -> list[str]:
    names = []
    for i, item in enumerate(node.items):
        if item.alias:
            names.append(item.alias)
        elif isinstance(item.expr, ast.ColumnRef):
            names.append(item.expr.name)
        else:
            names.append(f"_c{i}")
    return names


def build_full_rewrite(node: ast.Select, q: SpjaForm, view: MatView,
                       cr: ContainmentResult) -> ast.Select:
    """The query re-aimed at the view's storage table."""
    global_agg = bool(q.aggs) and not q.group_cols
    mapping: dict = {}
    for ident, col in view.group_cols.items():
        ref = q.col_refs.get(ident)
        if ref is not None:
            mapping[ref] = _mvref(view, col)
    for spec, calls in q.agg_nodes.items():
        entry = cr.rollup[spec]
        if not view.is_spja:
            # view rows are base rows; aggregate over its columns directly
            repl = _rollup_expr(entry, lambda e: _mvref(view, view.group_cols[e[1]]),
                                global_agg)
        else:
            repl = _rollup_expr(entry, lambda e: _mvref(view, e[1]), global_agg)
        for call in calls:
            mapping[call] = repl

    names = _output_aliases(node)
    items = tuple(
        ast.SelectItem(_replace(it.expr, mapping), names[i])
        for i, it in enumerate(node.items))
    comp = _comp_conjuncts(
        q, cr.compensation_cols, lambda col: _mvref(view, view.group_cols[col]))
    group_by = tuple(_replace(g, mapping) for g in node.group_by)
    having = _replace(node.having, mapping) if node.having is not None else None
    order_by = tuple((_replace(e, mapping), d) for e, d in node.order_by)
    return ast.Select(
        items=items,
        from_refs=(_mv_from_ref(view),),
        where=conjoin(comp),
        group_by=group_by,
        having=having,
        order_by=order_by,
        limit=node.limit,
    )


def _partial_cols(q: SpjaForm, cr: ContainmentResult):
    """Deduplicated partial-aggregate columns the union branches must carry.

    Each entry is ("sum"|"cnt"|"min"|"max", source) where source names the
    view column (SPJA view) and the canonical base column for branch two.
    """
    order: list[tuple] = []
    seen: dict[tuple, int] = {}

    def add(kind, mv_col, base_arg):
        key = (kind, mv_col, base_arg)
        if key not in seen:
            seen[key] = len(order)
            order.append(key)
        return seen[key]

    slot_of: dict[AggSpec, tuple] = {}
    for spec in q.aggs:
        entry = cr.rollup[spec]
        kind = entry[0]
        if kind == "direct":
            k = {"sum": "sum", "count": "cnt", "min": "min", "max": "max",
                 "avg": "avg"}[entry[1]]
            if k == "avg":
                i = add("sum", None, entry[2])
                j = add("cnt", None, entry[2])
                slot_of[spec] = ("avg", i, j)
            else:
                i = add(k, None, entry[2])
                slot_of[spec] = (k, i)
        elif kind == "avg":
            i = add("sum", entry[1], spec.arg)
            j = add("cnt", entry[2], spec.arg)
            slot_of[spec] = ("avg", i, j)
        else:
            i = add(kind, entry[1], spec.arg)
            slot_of[spec] = (kind, i)
    return order, slot_of


def build_partial_rewrite(node: ast.Select, q: SpjaForm, view: MatView,
                          cr: ContainmentResult) -> ast.Select:
    """Union of the view slice and a recomputed residual slice."""
    global_agg = bool(q.aggs) and not q.group_cols
    partials, slot_of = _partial_cols(q, cr)
    ref_cols = sorted(q.all_ref_cols) if not q.grouped else []
    group_idents = list(q.group_cols) if q.grouped else ref_cols

    # branch one: the view's slice
    b1_items = []
    for i, ident in enumerate(group_idents):
        b1_items.append(ast.SelectItem(
            _mvref(view, view.group_cols[ident]), f"_mg{i}"))
    for k, (kind, mv_col, base_arg) in enumerate(partials):
        if view.is_spja:
            expr: ast.Expr = _mvref(view, mv_col)
        else:
            func = {"sum": "sum", "cnt": "count", "min": "min", "max": "max"}[kind]
            if base_arg is None:
                arg: ast.Expr = ast.Star()
            else:
                arg = _mvref(view, view.group_cols[base_arg])
            expr = ast.FuncCall(func, (arg,))
        b1_items.append(ast.SelectItem(expr, f"_mp{k}"))
    comp = _comp_conjuncts(
        q, cr.compensation_cols, lambda col: _mvref(view, view.group_cols[col]))
    b1_group: tuple = ()
    if not view.is_spja and q.grouped:
        b1_group = tuple(_mvref(view, view.group_cols[i]) for i in group_idents)
    b1 = ast.Select(
        items=tuple(b1_items),
        from_refs=(_mv_from_ref(view),),
        where=conjoin(comp),
        group_by=b1_group,
    )

    # branch two: recompute the residual slice from the sources
    b2_items = []
    for i, ident in enumerate(group_idents):
        b2_items.append(ast.SelectItem(q.col_refs[ident], f"_mg{i}"))
    for k, (kind, _, base_arg) in enumerate(partials):
        func = {"sum": "sum", "cnt": "count", "min": "min", "max": "max"}[kind]
        arg = ast.Star() if base_arg is None else q.col_refs[base_arg]
        b2_items.append(ast.SelectItem(ast.FuncCall(func, (arg,)), f"_mp{k}"))
    residual = _residual_conjuncts(q.col_refs[cr.residual_col], cr.residual)
    b2_where = conjoin(conjuncts(node.where) + residual)
    b2_group: tuple = ()
    if q.grouped:
        b2_group = tuple(q.group_exprs)
    b2 = ast.Select(
        items=tuple(b2_items),
        from_refs=node.from_refs,
        where=b2_where,
        group_by=b2_group,
    )

    union_ref = ast.SubqueryRef(ast.UnionAll(branches=(b1, b2)), "_u")

    def uref(name: str) -> ast.ColumnRef:
        return ast.ColumnRef("_u", name)

    mapping: dict = {}
    for i, ident in enumerate(group_idents):
        ref = q.col_refs.get(ident)
        if ref is not None:
            mapping[ref] = uref(f"_mg{i}")
    for spec, calls in q.agg_nodes.items():
        slot = slot_of[spec]
        if slot[0] == "avg":
            repl: ast.Expr = ast.BinaryOp(
                "/",
                ast.FuncCall("sum", (uref(f"_mp{slot[1]}"),)),
                ast.FuncCall("sum", (uref(f"_mp{slot[2]}"),)))
        else:
            kind, idx = slot
            inner = ast.FuncCall(
                {"sum": "sum", "cnt": "sum", "min": "min", "max": "max"}[kind],
                (uref(f"_mp{idx}"),))
            if kind == "cnt" and global_agg:
                inner = ast.FuncCall("coalesce", (inner, ast.Literal(0)))
            repl = inner
        for call in calls:
            mapping[call] = repl

    names = _output_aliases(node)
    items = tuple(
        ast.SelectItem(_replace(it.expr, mapping), names[i])
        for i, it in enumerate(node.items))
    outer_group: tuple = ()
    if q.grouped:
        outer_group = tuple(
            uref(f"_mg{i}") for i in range(len(group_idents)))
    having = _replace(node.having, mapping) if node.having is not None else None
    order_by = tuple((_replace(e, mapping), d) for e, d in node.order_by)
    return ast.Select(
        items=items,
        from_refs=(union_ref,),
        where=None,
        group_by=outer_group,
        having=having,
        order_by=order_by,
        limit=node.limit,
    )


# --------------------------------------------------------------- freshness


def _stored_wil(qname: str, snap) -> WriteIdList | None:
    if snap is None:
        return None
    hwm, excs = snap
    return WriteIdList(qname, hwm, frozenset(excs), frozenset())


def _sources_changed(record: MatViewRecord, catalog: Catalog, wil_of) -> bool:
    for qname in record.source_tables:
        stored = _stored_wil(qname, record.source_snapshots.get(qname))
        if stored is None:
            return True
        cur = wil_of(catalog.get_table(*qname.split(".", 1)))
        if not cur.visible_set_equals(stored):
            return True
    return False


def is_fresh(record: MatViewRecord, catalog: Catalog, wil_of,
             now_ms: float | None = None) -> bool:
    """Usable for rewriting: sources unchanged, or staleness within window."""
    if not _sources_changed(record, catalog, wil_of):
        return True
    if now_ms is None:
        now_ms = time.time() * 1000.0
    age_ms = now_ms - record.last_build_time * 1000.0
    return age_ms <= record.staleness_window_ms


# ------------------------------------------------------- planner candidates


def candidate_source(catalog: Catalog, wil_of, now_ms_fn=None):
    """Build the mv_candidates hook for PlannerConfig.

    Yields (view name, rewritten resolved AST) pairs for every registered,
    fresh view that contains the query.
    """

    def candidates(resolved_node):
        if not isinstance(resolved_node, ast.Select):
            return
        q = None
        for record in catalog.materialized_views():
            try:
                view = load_view(catalog, record)
            except Exception:
                continue  # a broken registration must not sink planning
            now_ms = now_ms_fn() if now_ms_fn is not None else None
            if not is_fresh(record, catalog, wil_of, now_ms):
                continue
            if q is None:
                q = extract_spja(resolved_node)
                if q is None:
                    return
            cr = check_containment(q, view)
            if cr.kind == "FULL":
                yield record.name, build_full_rewrite(resolved_node, q, view, cr)
            elif cr.kind == "PARTIAL":
                yield record.name, build_partial_rewrite(resolved_node, q, view, cr)

    return candidates


# ----------------------------------------------------------------- create


def create_materialized_view(catalog: Catalog, stmt: ast.CreateMaterializedView,
                             database: str = "default") -> MatViewRecord:
    """Register the view and its storage table. Rows appear on first rebuild."""
    db = stmt.database or database
    qname = f"{db}.{stmt.name}"
    res = resolve_query(stmt.query, catalog, db)
    form = extract_spja(res.node, db)
    _validate_definition(res, form, db)

    staleness = 0
    for key, value in stmt.properties:
        if key == "staleness_window_ms":
            try:
                staleness = int(value)
            except ValueError:
                raise MatViewError(
                    f"bad staleness_window_ms value {value!r}") from None
        else:
            raise MatViewError(f"unknown view property {key!r}")
    if staleness < 0:
        raise MatViewError("staleness_window_ms must be nonnegative")

    columns = tuple(Column(name, ctype) for name, ctype in res.output)
    catalog.create_table(TableDef(db, stmt.name, columns))
    try:
        record = MatViewRecord(
            name=qname,
            definition_text=unparse(stmt.query),
            source_tables=tuple(t.qualified_name for t in res.tables),
            staleness_window_ms=staleness,
        )
        catalog.register_materialized_view(record)
    except Exception:
        catalog.drop_table(db, stmt.name)
        raise
    return record


def drop_materialized_view(catalog: Catalog, database: str, name: str) -> None:
    catalog.drop_table(database, name)


# ---------------------------------------------------------------- rebuild


@dataclass
class RebuildReport:
    view: str
    mode: str  # "full" | "incremental" | "noop"
    rows_written: int = 0
    rows_deleted: int = 0


_REBUILD_LOCKS: dict = {}
_REBUILD_MU = threading.Lock()


def _rebuild_lock(catalog: Catalog, qname: str) -> threading.Lock:
    key = (str(catalog.warehouse), qname)
    with _REBUILD_MU:
        return _REBUILD_LOCKS.setdefault(key, threading.Lock())


def _new_write_ids(cur: WriteIdList, stored: WriteIdList | None) -> set[int]:
    out = set()
    for w in range(1, cur.hwm_write_id + 1):
        if cur.is_visible(w) and (stored is None or not stored.is_visible(w)):
            out.add(w)
    return out


def _deletes_since(catalog: Catalog, qname: str, new_ids: set[int]) -> bool:
    """Conservative: any directory overlapping the new ids that could carry
    delete markers (explicit delete deltas, or compacted dirs that may have
    absorbed them) forces a full rebuild."""
    if not new_ids:
        return False
    lo = min(new_ids)
    tdef = catalog.get_table(*qname.split(".", 1))
    for pkey in catalog.partitions(qname):
        pdir = partition_path(
            catalog.warehouse, tdef.database, tdef.name,
            tdef.partition_columns, pkey)
        for d in list_acid_dirs(pdir):
            if d.kind is DirKind.DELETE_DELTA:
                if d.max_write_id >= lo and d.min_write_id <= max(new_ids):
                    return True
            elif d.kind is DirKind.BASE or d.min_write_id != d.max_write_id:
                # compaction output; if it swallowed any new id its inputs
                # may have included delete markers we can no longer see
                if d.max_write_id >= lo:
                    return True
    return False


def _run_definition(view: MatView, catalog: Catalog, wil_of, cache, handlers,
                    overrides_scan=None) -> list[tuple]:
    config = PlannerConfig(mv_rewrite_enabled=False, semijoin_enabled=False)
    plan = optimize(view.node, catalog, wil_of, config=config)
    if overrides_scan is not None:
        for n in plan.walk():
            if isinstance(n, ScanNode):
                overrides_scan(n)
    ctx = ExecContext(catalog=catalog, cache=cache, handlers=handlers)
    rows, _ = execute_plan(plan, ctx)
    return rows


def _merge_groups(view: MatView, target: dict, rows) -> None:
    """Fold rows keyed by grouping columns into target, combining partials."""
    specs = view.out_specs
    gidx = [i for i, s in enumerate(specs) if s[0] == "group"]
    arg_slot = {}  # avg support: column name -> position
    for i, s in enumerate(specs):
        if s[0] == "agg":
            arg_slot[(s[1].func, s[1].arg)] = i
    for row in rows:
        key = tuple(row[i] for i in gidx)
        cur = target.get(key)
        if cur is None:
            target[key] = list(row)
            continue
        for i, s in enumerate(specs):
            if s[0] != "agg":
                continue
            spec = s[1]
            a, b = cur[i], row[i]
            if spec.func in ("sum", "min", "max"):
                if a is None:
                    cur[i] = b
                elif b is not None:
                    cur[i] = (a + b if spec.func == "sum"
                              else (min(a, b) if spec.func == "min" else max(a, b)))
            elif spec.func == "count":
                cur[i] = (a or 0) + (b or 0)
    # avg columns are recomputed from their sum/count partners after merging
    for i, s in enumerate(specs):
        if s[0] == "agg" and s[1].func == "avg":
            si = arg_slot.get(("sum", s[1].arg))
            ci = arg_slot.get(("count", s[1].arg))
            for cur in target.values():
                cnt = cur[ci] or 0
                cur[i] = float(cur[si]) / cnt if cnt and cur[si] is not None else None


def _load_current_rows(view: MatView, catalog: Catalog, wil_of):
    """Stored view rows in pipeline values, each as (record_id, row)."""
    wil = wil_of(view.table)
    req = ScanRequest(
        table=view.table, wil=wil, partitions=catalog.partitions(view.record.name),
        include_record_ids=True)
    out = []
    convs = []
    for c in view.table.columns:
        if c.ctype.kind is TypeKind.DECIMAL:
            scale = c.ctype.scale
            convs.append(lambda v, s=scale: None if v is None
                         else Decimal(v).scaleb(-s))
        else:
            convs.append(None)
    for rec in snapshot_read(catalog.warehouse, req, io=DirectIO()):
        rid, values = rec[0], rec[1:]
        row = tuple(v if f is None else f(v) for f, v in zip(convs, values))
        out.append((rid, row))
    return out


def _coerce_rows(view: MatView, rows) -> list[tuple]:
    cols = view.table.columns
    return [tuple(coerce_value(v, c.ctype) for v, c in zip(row, cols))
            for row in rows]


def rebuild(catalog: Catalog, txn_manager, qname: str, cache=None,
            handlers=None) -> RebuildReport:
    """Bring the view up to date under a fresh snapshot.

    Raises RebuildInProgress when another rebuild of the same view is running.
    """
    record = catalog.get_materialized_view(qname)
    if record is None:
        raise MatViewError(f"no such materialized view {qname}")
    lock = _rebuild_lock(catalog, qname)
    if not lock.acquire(blocking=False):
        raise RebuildInProgress(f"rebuild of {qname} already running")
    try:
        return _rebuild_locked(catalog, txn_manager, record, cache, handlers)
    finally:
        lock.release()


def _rebuild_locked(catalog, txn_manager, record, cache, handlers) -> RebuildReport:
    qname = record.name
    view = load_view(catalog, record)
    txn = txn_manager.open_txn()
    committed = False
    try:
        snap = txn_manager.get_snapshot()
        wil_of = wil_binder(txn_manager, snap)
        sources = list(record.source_tables)
        cur_wils = {s: wil_of(catalog.get_table(*s.split(".", 1))) for s in sources}
        stored_wils = {s: _stored_wil(s, record.source_snapshots.get(s))
                       for s in sources}

        changed = [s for s in sources
                   if stored_wils[s] is None
                   or not cur_wils[s].visible_set_equals(stored_wils[s])]
        if not changed:
            txn_manager.abort_txn(txn)
            committed = True  # nothing staged, nothing left to roll back
            record.last_build_time = time.time()
            catalog.update_materialized_view(record)
            return RebuildReport(qname, "noop")

        new_ids = {s: _new_write_ids(cur_wils[s], stored_wils[s]) for s in sources}
        can_incremental = all(stored_wils[s] is not None for s in sources) and \
            not any(_deletes_since(catalog, s, new_ids[s]) for s in sources)

        existing = _load_current_rows(view, catalog, wil_of)
        if can_incremental:
            term_rows: list[tuple] = []
            for i, src in enumerate(sources):
                if not new_ids[src]:
                    continue

                def overrides(scan, pivot=i):
                    sq = scan.table.qualified_name
                    j = sources.index(sq)
                    if j == pivot:
                        scan.new_rows_baseline = stored_wils[sq]
                    elif j < pivot:
                        scan.as_of = stored_wils[sq]
                    # j > pivot reads the current snapshot unchanged

                term_rows.extend(_run_definition(
                    view, catalog, wil_of, cache, handlers,
                    overrides_scan=overrides))
            report = _apply_incremental(
                catalog, txn_manager, txn, view, existing, term_rows)
        else:
            rows = _run_definition(view, catalog, wil_of, cache, handlers)
            report = _apply_full(catalog, txn_manager, txn, view, existing, rows)
        committed = True

        record.source_snapshots = {
            s: (cur_wils[s].hwm_write_id, tuple(sorted(cur_wils[s].exceptions)))
            for s in sources}
        record.delete_watermarks = {
            s: cur_wils[s].hwm_write_id for s in sources}
        record.last_build_time = time.time()
        catalog.update_materialized_view(record)
        return report
    except Exception:
        if not committed:
            try:
                txn_manager.abort_txn(txn)
            except Exception:
                pass
        raise


def _apply_incremental(catalog, txn_manager, txn, view: MatView,
                       existing, term_rows) -> RebuildReport:
    qname = view.record.name
    if not term_rows:
        # new write ids carried no matching rows; only the snapshot advances
        txn_manager.abort_txn(txn)
        return RebuildReport(qname, "incremental")
    if not view.is_spja:
        # projection views are append-only under insert-only sources
        return _write_view_rows(catalog, txn_manager, txn, view,
                                [], [tuple(r) for r in term_rows], existing,
                                mode="incremental")
    delta: dict = {}
    _merge_groups(view, delta, term_rows)
    specs = view.out_specs
    gidx = [i for i, s in enumerate(specs) if s[0] == "group"]
    affected = [(rid, row) for rid, row in existing
                if tuple(row[i] for i in gidx) in delta]
    # fold the stored partials into the new ones, then rewrite those groups
    _merge_groups(view, delta, [row for _, row in affected])
    delete_rids = [rid for rid, _ in affected]
    insert_rows = [tuple(v) for v in delta.values()]
    return _write_view_rows(catalog, txn_manager, txn, view,
                            delete_rids, insert_rows, existing,
                            mode="incremental")


def _apply_full(catalog, txn_manager, txn, view: MatView, existing,
                rows) -> RebuildReport:
    delete_rids = [rid for rid, _ in existing]
    return _write_view_rows(catalog, txn_manager, txn, view,
                            delete_rids, [tuple(r) for r in rows], existing,
                            mode="full")


def _write_view_rows(catalog, txn_manager, txn, view: MatView,
                     delete_rids, insert_rows, existing, mode) -> RebuildReport:
    qname = view.record.name
    writer = TxnWriter(catalog.warehouse, txn)
    try:
        write_id = txn_manager.allocate_write_id(txn, qname)
        if delete_rids:
            txn_manager.record_write_set(txn, qname, delete_rids)
            writer.write_delete_delta(view.table, (), write_id, delete_rids)
        storage_rows = _coerce_rows(view, insert_rows)
        if storage_rows:
            writer.write_insert_delta(view.table, (), write_id, storage_rows)
        writer.commit()
        txn_manager.commit_txn(txn)
    except Exception:
        writer.discard()
        raise

    deleted = set(delete_rids)
    final = [row for rid, row in existing if rid not in deleted]
    final.extend(insert_rows)
    final_storage = _coerce_rows(view, final)
    stats = {}
    for i, col in enumerate(view.table.columns):
        stats[col.name] = ColumnStats.from_values(
            [r[i] for r in final_storage])
    catalog.replace_stats(qname, (), stats)
    return RebuildReport(qname, mode, rows_written=len(insert_rows),
                         rows_deleted=len(delete_rids))
