"""Name resolution: bind every table and column reference of a query.

The output is a rewritten AST in which every TableRef carries its database
and every ColumnRef carries the binding (table alias) it resolves to. The
canonical text of that tree doubles as the result-cache key, so resolution
must be deterministic: generated item names, binding choices, and literal
normalization may depend only on the statement and the catalog state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import AmbiguousColumn, ColumnNotFound, PlanError
from ..schema import FLOAT64, ColumnType, TableDef, TypeKind
from ..sql import ast
from .expr import (
    _children,
    contains_aggregate,
    contains_volatile,
    ident,
    infer_type,
    is_aggregate_call,
    normalize_literals,
    walk,
)

_NILADIC = ("current_date", "current_timestamp")


@dataclass
class Relation:
    """One resolved FROM item: a table or a derived subquery."""

    binding: str
    columns: list[tuple[str, ColumnType | None]]
    table: TableDef | None = None

    def has(self, name: str) -> bool:
        return any(c == name for c, _ in self.columns)


@dataclass
class ResolvedStatement:
    """A resolved query: qualified AST, output schema, referenced tables."""

    node: ast.Select | ast.UnionAll
    output: list[tuple[str, ColumnType | None]]
    tables: list[TableDef] = field(default_factory=list)
    volatile: bool = False


class _Scope:
    def __init__(self, relations: list[Relation]):
        self.relations = relations
        self.by_binding = {r.binding: r for r in relations}
        self.env: dict[str, ColumnType | None] = {}
        for r in relations:
            for name, t in r.columns:
                self.env[f"{r.binding}.{name}"] = t

    def resolve_column(self, ref: ast.ColumnRef) -> ast.ColumnRef:
        if ref.qualifier is not None:
            rel = self.by_binding.get(ref.qualifier)
            if rel is None:
                raise ColumnNotFound(f"unknown table alias {ref.qualifier!r}")
            if not rel.has(ref.name):
                raise ColumnNotFound(f"{ref.qualifier}.{ref.name}")
            return ref
        owners = [r for r in self.relations if r.has(ref.name)]
        if len(owners) > 1:
            names = ", ".join(r.binding for r in owners)
            raise AmbiguousColumn(f"column {ref.name!r} is ambiguous ({names})")
        if not owners:
            raise ColumnNotFound(ref.name)
        return ast.ColumnRef(owners[0].binding, ref.name)


def _resolve_expr(e: ast.Expr, scope: _Scope) -> ast.Expr:
    if isinstance(e, ast.ColumnRef):
        if e.qualifier is None and e.name in _NILADIC:
            try:
                return scope.resolve_column(e)
            except ColumnNotFound:
                return ast.FuncCall(e.name, ())
        return scope.resolve_column(e)
    if isinstance(e, ast.BinaryOp):
        return ast.BinaryOp(e.op, _resolve_expr(e.left, scope), _resolve_expr(e.right, scope))
    if isinstance(e, ast.UnaryOp):
        return ast.UnaryOp(e.op, _resolve_expr(e.operand, scope))
    if isinstance(e, ast.FuncCall):
        args = []
        for a in e.args:
            if isinstance(a, ast.Star):
                if e.name != "count":
                    raise PlanError(f"* is not a valid argument to {e.name}")
                args.append(a)
            else:
                args.append(_resolve_expr(a, scope))
        return ast.FuncCall(e.name, tuple(args), e.distinct)
    if isinstance(e, ast.InExpr):
        return ast.InExpr(_resolve_expr(e.operand, scope),
                          tuple(_resolve_expr(i, scope) for i in e.items), e.negated)
    if isinstance(e, ast.BetweenExpr):
        return ast.BetweenExpr(_resolve_expr(e.operand, scope),
                               _resolve_expr(e.low, scope),
                               _resolve_expr(e.high, scope), e.negated)
    if isinstance(e, ast.IsNullExpr):
        return ast.IsNullExpr(_resolve_expr(e.operand, scope), e.negated)
    if isinstance(e, ast.ExtractExpr):
        return ast.ExtractExpr(e.part, _resolve_expr(e.operand, scope))
    if isinstance(e, ast.Star):
        raise PlanError("* is only valid as a select item or inside COUNT(*)")
    return e


def _substitute_aliases(e: ast.Expr, alias_map: dict[str, ast.Expr]) -> ast.Expr:
    """Replace bare output-name references (ORDER BY / HAVING position)."""
    if isinstance(e, ast.ColumnRef) and e.qualifier is None and e.name in alias_map:
        return alias_map[e.name]
    if isinstance(e, ast.BinaryOp):
        return ast.BinaryOp(e.op, _substitute_aliases(e.left, alias_map),
                            _substitute_aliases(e.right, alias_map))
    if isinstance(e, ast.UnaryOp):
        return ast.UnaryOp(e.op, _substitute_aliases(e.operand, alias_map))
    if isinstance(e, ast.FuncCall):
        return ast.FuncCall(
            e.name,
            tuple(a if isinstance(a, ast.Star) else _substitute_aliases(a, alias_map)
                  for a in e.args),
            e.distinct)
    if isinstance(e, ast.InExpr):
        return ast.InExpr(_substitute_aliases(e.operand, alias_map),
                          tuple(_substitute_aliases(i, alias_map) for i in e.items),
                          e.negated)
    if isinstance(e, ast.BetweenExpr):
        return ast.BetweenExpr(_substitute_aliases(e.operand, alias_map),
                               _substitute_aliases(e.low, alias_map),
                               _substitute_aliases(e.high, alias_map), e.negated)
    if isinstance(e, ast.IsNullExpr):
        return ast.IsNullExpr(_substitute_aliases(e.operand, alias_map), e.negated)
    if isinstance(e, ast.ExtractExpr):
        return ast.ExtractExpr(e.part, _substitute_aliases(e.operand, alias_map))
    return e


def _item_name(item: ast.SelectItem, position: int) -> str:
    if item.alias:
        return item.alias
    if isinstance(item.expr, ast.ColumnRef):
        return item.expr.name
    return f"_c{position}"


def _check_grouping(e: ast.Expr, group_keys: tuple, where: str) -> None:
    """Outside aggregates, only group keys and constants may appear."""
    if e in group_keys or is_aggregate_call(e):
        return
    if isinstance(e, ast.ColumnRef):
        raise PlanError(
            f"column {ident(e)} in {where} is neither aggregated nor in GROUP BY")
    for child in _children(e):
        _check_grouping(child, group_keys, where)


def _no_nested_aggregates(e: ast.Expr) -> None:
    for n in walk(e):
        if is_aggregate_call(n):
            for a in n.args:
                if not isinstance(a, ast.Star) and contains_aggregate(a):
                    raise PlanError("nested aggregate calls are not allowed")


def _resolve_select(sel: ast.Select, catalog, database: str,
                    acc: ResolvedStatement) -> tuple[ast.Select, list]:
    relations: list[Relation] = []
    new_refs: list = []
    for ref in sel.from_refs:
        if isinstance(ref, ast.SubqueryRef):
            sub_node, sub_output = _resolve_node(ref.query, catalog, database, acc)
            names = [n for n, _ in sub_output]
            if len(set(names)) != len(names):
                raise PlanError(
                    f"derived table {ref.alias!r} has duplicate column names")
            rel = Relation(ref.alias, list(sub_output))
            new_refs.append(ast.SubqueryRef(sub_node, ref.alias))
        else:
            tdef = catalog.get_table(ref.database or database, ref.name)
            binding = ref.alias or tdef.name
            cols = [(c.name, c.ctype) for c in tdef.logical_columns()]
            rel = Relation(binding, cols, table=tdef)
            if tdef.qualified_name not in {t.qualified_name for t in acc.tables}:
                acc.tables.append(tdef)
            new_refs.append(ast.TableRef(tdef.database, tdef.name, ref.alias))
        if rel.binding in {r.binding for r in relations}:
            raise PlanError(f"duplicate table alias {rel.binding!r}")
        relations.append(rel)

    scope = _Scope(relations)

    def norm(e: ast.Expr) -> ast.Expr:
        return normalize_literals(_resolve_expr(e, scope), scope.env)

    items: list[ast.SelectItem] = []
    for item in sel.items:
        if isinstance(item.expr, ast.Star):
            if item.expr.qualifier is None:
                if not relations:
                    raise PlanError("SELECT * with no FROM clause")
                targets = relations
            else:
                rel = scope.by_binding.get(item.expr.qualifier)
                if rel is None:
                    raise ColumnNotFound(
                        f"unknown table alias {item.expr.qualifier!r}")
                targets = [rel]
            for rel in targets:
                for name, _ in rel.columns:
                    items.append(ast.SelectItem(ast.ColumnRef(rel.binding, name), None))
        else:
            e = norm(item.expr)
            alias = item.alias
            if alias is None and not isinstance(e, ast.ColumnRef):
                alias = f"_c{len(items)}"
            items.append(ast.SelectItem(e, alias))

    alias_map = {
        _item_name(it, i): it.expr for i, it in enumerate(items)
    }

    def norm_output(e: ast.Expr) -> ast.Expr:
        return normalize_literals(
            _resolve_expr(_substitute_aliases(e, alias_map), scope), scope.env)

    where = norm(sel.where) if sel.where is not None else None
    group_by = tuple(norm(g) for g in sel.group_by)
    having = norm_output(sel.having) if sel.having is not None else None
    order_by = tuple((norm_output(e), desc) for e, desc in sel.order_by)

    aggregated = bool(group_by) or any(
        contains_aggregate(it.expr) for it in items) or (
        having is not None and contains_aggregate(having))
    if aggregated:
        for it in items:
            _check_grouping(it.expr, group_by, "select list")
        if having is not None:
            _check_grouping(having, group_by, "HAVING")
        for e, _ in order_by:
            _check_grouping(e, group_by, "ORDER BY")
        for g in group_by:
            if contains_aggregate(g):
                raise PlanError("aggregates are not allowed in GROUP BY")
    elif having is not None:
        raise PlanError("HAVING requires GROUP BY or aggregates")
    if where is not None and contains_aggregate(where):
        raise PlanError("aggregates are not allowed in WHERE")

    checked = [it.expr for it in items] + [e for e, _ in order_by]
    checked += [e for e in (where, having) if e is not None]
    checked += list(group_by)
    for e in checked:
        _no_nested_aggregates(e)
        infer_type(e, scope.env)

    output: list[tuple[str, ColumnType | None]] = []
    for i, it in enumerate(items):
        output.append((_item_name(it, i), infer_type(it.expr, scope.env)))

    resolved = ast.Select(tuple(items), tuple(new_refs), where, group_by,
                          having, order_by, sel.limit, sel.distinct)
    return resolved, output


def _unify(a: ColumnType | None, b: ColumnType | None) -> ColumnType | None:
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
    raise PlanError(
        f"UNION ALL branch column types {a.render()} and {b.render()} do not align")


def _resolve_node(q, catalog, database: str, acc: ResolvedStatement):
    if isinstance(q, ast.Select):
        return _resolve_select(q, catalog, database, acc)
    if isinstance(q, ast.UnionAll):
        branches = []
        output: list[tuple[str, ColumnType | None]] = []
        for i, b in enumerate(q.branches):
            node, out = _resolve_select(b, catalog, database, acc)
            branches.append(node)
            if i == 0:
                output = list(out)
            else:
                if len(out) != len(output):
                    raise PlanError("UNION ALL branches have different column counts")
                output = [(n0, _unify(t0, t1))
                          for (n0, t0), (_, t1) in zip(output, out)]
        resolved_order = []
        names = {n for n, _ in output}
        for e, desc in q.order_by:
            if not (isinstance(e, ast.ColumnRef) and e.qualifier is None
                    and e.name in names):
                raise PlanError("UNION ALL ORDER BY must reference output column names")
            resolved_order.append((e, desc))
        node = ast.UnionAll(tuple(branches), tuple(resolved_order), q.limit)
        return node, output
    raise PlanError(f"cannot resolve query {q!r}")


def resolve_query(q, catalog, database: str = "default") -> ResolvedStatement:
    """Resolve a SELECT or UNION ALL against the catalog."""
    acc = ResolvedStatement(q, [])
    node, output = _resolve_node(q, catalog, database, acc)
    acc.node = node
    acc.output = output
    acc.volatile = _any_volatile(node)
    return acc


def _any_volatile(node) -> bool:
    if isinstance(node, ast.UnionAll):
        return any(_any_volatile(b) for b in node.branches)
    sel: ast.Select = node
    exprs = [it.expr for it in sel.items]
    exprs += [e for e, _ in sel.order_by]
    exprs += [e for e in (sel.where, sel.having) if e is not None]
    exprs += list(sel.group_by)
    if any(contains_volatile(e) for e in exprs):
        return True
    for ref in sel.from_refs:
        if isinstance(ref, ast.SubqueryRef) and _any_volatile(ref.query):
            return True
    return False
