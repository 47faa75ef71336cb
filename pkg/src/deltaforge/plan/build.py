"""Initial physical plan construction from a resolved AST.

The builder is deliberately mechanical: left-deep joins in syntactic
order, filters placed as soon as their inputs are available, aggregate
outputs renamed to positional slots (_gN for group keys, _aN for
aggregate results). All cost-based decisions happen later in the
optimizer; the builder's only cleverness is projection pruning on scans.
"""

from __future__ import annotations

from ..errors import PlanError
from ..schema import ColumnType, TypeKind, FLOAT64
from ..sql import ast
from .expr import (
    collect_aggregates,
    conjuncts,
    contains_aggregate,
    infer_type,
    replace_subtrees,
    walk,
)
from . import nodes as pn


def _ref(ident: str) -> ast.ColumnRef:
    if "." in ident:
        q, n = ident.split(".", 1)
        return ast.ColumnRef(q, n)
    return ast.ColumnRef(None, ident)


def _bindings(e: ast.Expr) -> set[str]:
    out = set()
    for n in walk(e):
        if isinstance(n, ast.ColumnRef) and n.qualifier is not None:
            out.add(n.qualifier)
    return out


def _env(node: pn.PlanNode) -> dict[str, ColumnType | None]:
    return {c.ident: c.ctype for c in node.schema}


class _Builder:
    def __init__(self, catalog, wil_of):
        self.catalog = catalog
        self.wil_of = wil_of

    # --------------------------------------------------------- FROM items

    def _scan(self, ref: ast.TableRef, used: dict[str, set[str]]) -> pn.ScanNode:
        tdef = self.catalog.get_table(ref.database, ref.name)
        binding = ref.alias or tdef.name
        wanted = used.get(binding, set())
        cols = [c for c in tdef.logical_columns() if c.name in wanted]
        schema = tuple(
            pn.OutCol(c.name, f"{binding}.{c.name}", c.ctype) for c in cols)
        wil = self.wil_of(tdef) if tdef.is_native else None
        return pn.ScanNode(
            children=(), schema=schema, table=tdef, binding=binding, wil=wil,
            partitions=None, projection=tuple(c.name for c in cols))

    def _derived(self, ref: ast.SubqueryRef) -> pn.PlanNode:
        sub = self.build(ref.query)
        exprs = tuple(_ref(c.ident) for c in sub.schema)
        schema = tuple(
            pn.OutCol(c.name, f"{ref.alias}.{c.name}", c.ctype) for c in sub.schema)
        return pn.ProjectNode(children=(sub,), schema=schema, exprs=exprs)

    # ------------------------------------------------------------- joins

    def _join_chain(self, sel: ast.Select, used) -> pn.PlanNode:
        plans: list[tuple[pn.PlanNode, set[str]]] = []
        for ref in sel.from_refs:
            if isinstance(ref, ast.SubqueryRef):
                plans.append((self._derived(ref), {ref.alias}))
            else:
                scan = self._scan(ref, used)
                plans.append((scan, {scan.binding}))
        remaining = list(conjuncts(sel.where)) if sel.where is not None else []

        def take_applicable(avail: set[str]):
            nonlocal remaining
            res = [c for c in remaining if _bindings(c) <= avail]
            remaining = [c for c in remaining if c not in res]
            return res

        if not plans:
            raise PlanError("query has no FROM clause")
        current, avail = plans[0]
        first_filters = take_applicable(avail)
        if first_filters:
            current = pn.FilterNode(children=(current,), schema=current.schema,
                                    conjuncts=tuple(first_filters))
        for nxt, nb in plans[1:]:
            both = avail | nb
            applicable = take_applicable(both)
            lkeys, rkeys, residual = [], [], []
            for c in applicable:
                if (isinstance(c, ast.BinaryOp) and c.op == "="
                        and isinstance(c.left, ast.ColumnRef)
                        and isinstance(c.right, ast.ColumnRef)):
                    lb, rb = _bindings(c.left), _bindings(c.right)
                    if lb <= avail and rb <= nb:
                        lkeys.append(c.left)
                        rkeys.append(c.right)
                        continue
                    if lb <= nb and rb <= avail:
                        lkeys.append(c.right)
                        rkeys.append(c.left)
                        continue
                residual.append(c)
            join = pn.HashJoinNode(
                children=(current, nxt), schema=current.schema + nxt.schema,
                left_keys=tuple(lkeys), right_keys=tuple(rkeys),
                build_side="right")
            current = join
            if residual:
                current = pn.FilterNode(children=(current,), schema=current.schema,
                                        conjuncts=tuple(residual))
            avail = both
        if remaining:
            current = pn.FilterNode(children=(current,), schema=current.schema,
                                    conjuncts=tuple(remaining))
        return current

    # ------------------------------------------------------------ select

    def _build_select(self, sel: ast.Select) -> pn.PlanNode:
        used: dict[str, set[str]] = {}
        exprs = [it.expr for it in sel.items]
        exprs += [e for e in (sel.where, sel.having) if e is not None]
        exprs += list(sel.group_by) + [e for e, _ in sel.order_by]
        for e in exprs:
            for n in walk(e):
                if isinstance(n, ast.ColumnRef) and n.qualifier is not None:
                    used.setdefault(n.qualifier, set()).add(n.name)

        current = self._join_chain(sel, used)

        items = [it.expr for it in sel.items]
        names = []
        for i, it in enumerate(sel.items):
            if it.alias:
                names.append(it.alias)
            elif isinstance(it.expr, ast.ColumnRef):
                names.append(it.expr.name)
            else:
                names.append(f"_c{i}")
        having = sel.having
        order = list(sel.order_by)

        agg_calls = []
        for e in items + [x for x in (having,) if x is not None] + [e for e, _ in order]:
            for call in collect_aggregates(e):
                if call not in agg_calls:
                    agg_calls.append(call)
        aggregated = bool(sel.group_by) or bool(agg_calls)

        if aggregated:
            env = _env(current)
            mapping: dict[ast.Expr, ast.Expr] = {}
            schema = []
            for i, g in enumerate(sel.group_by):
                mapping[g] = ast.ColumnRef(None, f"_g{i}")
                schema.append(pn.OutCol(f"_g{i}", f"_g{i}", infer_type(g, env)))
            for i, call in enumerate(agg_calls):
                mapping[call] = ast.ColumnRef(None, f"_a{i}")
                schema.append(pn.OutCol(f"_a{i}", f"_a{i}", infer_type(call, env)))
            current = pn.AggregateNode(
                children=(current,), schema=tuple(schema),
                group_exprs=tuple(sel.group_by), agg_calls=tuple(agg_calls))
            items = [replace_subtrees(e, mapping) for e in items]
            if having is not None:
                having = replace_subtrees(having, mapping)
            order = [(replace_subtrees(e, mapping), d) for e, d in order]

        if having is not None:
            current = pn.FilterNode(children=(current,), schema=current.schema,
                                    conjuncts=tuple(conjuncts(having)))

        env = _env(current)
        out_schema = tuple(
            pn.OutCol(n, n, infer_type(e, env)) for n, e in zip(names, items))

        if sel.distinct:
            current = pn.ProjectNode(children=(current,), schema=out_schema,
                                     exprs=tuple(items))
            current = pn.AggregateNode(
                children=(current,), schema=out_schema,
                group_exprs=tuple(_ref(n) for n in names), agg_calls=())
            if order:
                keys = []
                for e, d in order:
                    e2 = replace_subtrees(e, dict(zip(items, (_ref(n) for n in names))))
                    for n in walk(e2):
                        if isinstance(n, ast.ColumnRef) and n.name not in names:
                            raise PlanError(
                                "ORDER BY with DISTINCT must use output columns")
                    keys.append((e2, d))
                current = pn.SortNode(children=(current,), schema=current.schema,
                                      keys=tuple(keys))
        else:
            if order:
                current = pn.SortNode(children=(current,), schema=current.schema,
                                      keys=tuple(order))
            current = pn.ProjectNode(children=(current,), schema=out_schema,
                                     exprs=tuple(items))

        if sel.limit is not None:
            current = pn.LimitNode(children=(current,), schema=current.schema,
                                   limit=sel.limit)
        return current

    # ------------------------------------------------------------- union

    def _build_union(self, u: ast.UnionAll) -> pn.PlanNode:
        branches = [self.build(b) for b in u.branches]
        first = branches[0].schema
        cols = []
        for i, c in enumerate(first):
            ct = c.ctype
            for b in branches[1:]:
                ct = _unify_types(ct, b.schema[i].ctype)
            cols.append(pn.OutCol(c.name, c.name, ct))
        schema = tuple(cols)
        current: pn.PlanNode = pn.UnionAllNode(children=tuple(branches),
                                               schema=schema)
        if u.order_by:
            current = pn.SortNode(children=(current,), schema=schema,
                                  keys=tuple(u.order_by))
        if u.limit is not None:
            current = pn.LimitNode(children=(current,), schema=schema,
                                   limit=u.limit)
        return current

    def build(self, node) -> pn.PlanNode:
        if isinstance(node, ast.Select):
            return self._build_select(node)
        if isinstance(node, ast.UnionAll):
            return self._build_union(node)
        raise PlanError(f"cannot build plan for {node!r}")


def _unify_types(a: ColumnType | None, b: ColumnType | None) -> ColumnType | None:
    if a is None:
        return b
    if b is None or a == b:
        return a
    numeric = (TypeKind.INT64, TypeKind.FLOAT64, TypeKind.DECIMAL)
    if a.kind in numeric and b.kind in numeric:
        if a.kind is TypeKind.DECIMAL and b.kind is TypeKind.DECIMAL:
            return ColumnType(TypeKind.DECIMAL, 38, max(a.scale or 0, b.scale or 0))
        if TypeKind.FLOAT64 in (a.kind, b.kind):
            return FLOAT64
        return a if a.kind is TypeKind.DECIMAL else b
    return None


def build_plan(node, catalog, wil_of) -> pn.PlanNode:
    """Build the unoptimized physical plan for a resolved query node.

    wil_of(table_def) must return the WriteIdList binding the scan of a
    native table under the current snapshot.
    """
    return _Builder(catalog, wil_of).build(node)
