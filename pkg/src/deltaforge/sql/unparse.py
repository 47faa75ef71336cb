"""Canonical text rendering of parsed statements.

The output is deterministic and reparses to an equal tree, which is what
makes it usable as a cache key: two statements that resolve to the same
tree render to the same text. Keywords are upper-cased, identifiers stay
lower-cased (the lexer already folded them), strings are single-quoted.
"""

from __future__ import annotations

from ..schema import ColumnType, TypeKind
from . import ast

# precedence levels mirror the parser; a child below its context level
# needs parentheses, a right-hand child at the same level keeps its shape
_LEVEL_OR = 1
_LEVEL_AND = 2
_LEVEL_NOT = 3
_LEVEL_CMP = 4
_LEVEL_ADD = 5
_LEVEL_MUL = 6
_LEVEL_UNARY = 7
_LEVEL_PRIMARY = 8

_BINARY_LEVELS = {
    "or": _LEVEL_OR,
    "and": _LEVEL_AND,
    "=": _LEVEL_CMP, "!=": _LEVEL_CMP, "<": _LEVEL_CMP,
    "<=": _LEVEL_CMP, ">": _LEVEL_CMP, ">=": _LEVEL_CMP,
    "+": _LEVEL_ADD, "-": _LEVEL_ADD,
    "*": _LEVEL_MUL, "/": _LEVEL_MUL,
}


def _level(e: ast.Expr) -> int:
    if isinstance(e, ast.BinaryOp):
        return _BINARY_LEVELS[e.op]
    if isinstance(e, ast.UnaryOp):
        return _LEVEL_NOT if e.op == "not" else _LEVEL_UNARY
    if isinstance(e, (ast.InExpr, ast.BetweenExpr, ast.IsNullExpr)):
        return _LEVEL_CMP
    return _LEVEL_PRIMARY


def _quote(s: str) -> str:
    return "'" + s.replace("'", "''") + "'"


def _literal(v) -> str:
    if v is None:
        return "NULL"
    if v is True:
        return "TRUE"
    if v is False:
        return "FALSE"
    if isinstance(v, str):
        return _quote(v)
    return repr(v)


def _expr(e: ast.Expr, context: int = 0, right: bool = False) -> str:
    lvl = _level(e)
    text = _render(e)
    if lvl < context or (right and lvl == context):
        return f"({text})"
    return text


def expr_text(e: ast.Expr) -> str:
    """Canonical text of a single expression (plan annotations, cache keys)."""
    return _expr(e)


def _render(e: ast.Expr) -> str:
    if isinstance(e, ast.Literal):
        return _literal(e.value)
    if isinstance(e, ast.ColumnRef):
        return f"{e.qualifier}.{e.name}" if e.qualifier else e.name
    if isinstance(e, ast.Star):
        return f"{e.qualifier}.*" if e.qualifier else "*"
    if isinstance(e, ast.FuncCall):
        inner = ", ".join(_expr(a) for a in e.args)
        if e.distinct:
            inner = "DISTINCT " + inner
        return f"{e.name.upper()}({inner})"
    if isinstance(e, ast.BinaryOp):
        lvl = _BINARY_LEVELS[e.op]
        op = e.op.upper() if e.op in ("and", "or") else e.op
        return f"{_expr(e.left, lvl)} {op} {_expr(e.right, lvl, right=True)}"
    if isinstance(e, ast.UnaryOp):
        if e.op == "not":
            return f"NOT {_expr(e.operand, _LEVEL_NOT)}"
        return f"-{_expr(e.operand, _LEVEL_UNARY)}"
    if isinstance(e, ast.InExpr):
        items = ", ".join(_expr(i) for i in e.items)
        word = "NOT IN" if e.negated else "IN"
        return f"{_expr(e.operand, _LEVEL_ADD)} {word} ({items})"
    if isinstance(e, ast.BetweenExpr):
        word = "NOT BETWEEN" if e.negated else "BETWEEN"
        return (f"{_expr(e.operand, _LEVEL_ADD)} {word} "
                f"{_expr(e.low, _LEVEL_ADD)} AND {_expr(e.high, _LEVEL_ADD)}")
    if isinstance(e, ast.IsNullExpr):
        word = "IS NOT NULL" if e.negated else "IS NULL"
        return f"{_expr(e.operand, _LEVEL_ADD)} {word}"
    if isinstance(e, ast.ExtractExpr):
        return f"EXTRACT({e.part.upper()} FROM {_expr(e.operand)})"
    raise TypeError(f"cannot render expression {e!r}")


def _type_text(t: ColumnType) -> str:
    if t.kind == TypeKind.INT64:
        return "BIGINT"
    if t.kind == TypeKind.FLOAT64:
        return "DOUBLE"
    if t.kind == TypeKind.STRING:
        return "STRING"
    if t.kind == TypeKind.BOOL:
        return "BOOLEAN"
    if t.kind == TypeKind.TIMESTAMP:
        return "TIMESTAMP"
    if t.kind == TypeKind.DECIMAL:
        return f"DECIMAL({t.precision}, {t.scale})"
    raise TypeError(f"cannot render type {t!r}")


def _table_name(db: str | None, name: str) -> str:
    return f"{db}.{name}" if db else name


def _table_ref(r) -> str:
    if isinstance(r, ast.SubqueryRef):
        return f"({_query(r.query)}) AS {r.alias}"
    text = _table_name(r.database, r.name)
    if r.alias:
        text += f" AS {r.alias}"
    return text


def _select_item(item: ast.SelectItem) -> str:
    text = _expr(item.expr)
    if item.alias:
        text += f" AS {item.alias}"
    return text


def _order_limit(order_by, limit) -> str:
    text = ""
    if order_by:
        keys = ", ".join(_expr(e) + (" DESC" if desc else "") for e, desc in order_by)
        text += f" ORDER BY {keys}"
    if limit is not None:
        text += f" LIMIT {limit}"
    return text


def _select(s: ast.Select, strip_order: bool = False) -> str:
    parts = ["SELECT"]
    if s.distinct:
        parts.append("DISTINCT")
    parts.append(", ".join(_select_item(i) for i in s.items))
    text = " ".join(parts)
    if s.from_refs:
        text += " FROM " + ", ".join(_table_ref(r) for r in s.from_refs)
    if s.where is not None:
        text += f" WHERE {_expr(s.where)}"
    if s.group_by:
        text += " GROUP BY " + ", ".join(_expr(e) for e in s.group_by)
    if s.having is not None:
        text += f" HAVING {_expr(s.having)}"
    if not strip_order:
        text += _order_limit(s.order_by, s.limit)
    return text


def _union_branch(s: ast.Select) -> str:
    # a branch carrying its own ordering must keep its parentheses or the
    # clauses would attach to the whole union on reparse
    if s.order_by or s.limit is not None:
        return f"({_select(s)})"
    return _select(s)


def _query(q) -> str:
    if isinstance(q, ast.Select):
        return _select(q)
    if isinstance(q, ast.UnionAll):
        text = " UNION ALL ".join(_union_branch(b) for b in q.branches)
        return text + _order_limit(q.order_by, q.limit)
    raise TypeError(f"cannot render query {q!r}")


def _column_specs(columns) -> str:
    return "(" + ", ".join(f"{c.name} {_type_text(c.ctype)}" for c in columns) + ")"


def _properties(props) -> str:
    return "(" + ", ".join(f"{_quote(k)} = {_quote(v)}" for k, v in props) + ")"


def _assignments(assignments) -> str:
    return ", ".join(f"{c} = {_expr(e)}" for c, e in assignments)


def unparse(stmt) -> str:
    """Render a statement or bare expression back to canonical text."""
    if isinstance(stmt, ast.Expr):
        return _expr(stmt)
    if isinstance(stmt, (ast.Select, ast.UnionAll)):
        return _query(stmt)
    if isinstance(stmt, ast.Explain):
        return "EXPLAIN " + unparse(stmt.statement)
    if isinstance(stmt, ast.CreateTable):
        text = "CREATE EXTERNAL TABLE" if stmt.external else "CREATE TABLE"
        text += f" {_table_name(stmt.database, stmt.name)}"
        if stmt.columns:
            text += f" {_column_specs(stmt.columns)}"
        if stmt.partition_by:
            text += f" PARTITIONED BY {_column_specs(stmt.partition_by)}"
        if stmt.stored_by:
            text += f" STORED BY {_quote(stmt.stored_by)}"
        if stmt.properties:
            text += f" TBLPROPERTIES {_properties(stmt.properties)}"
        return text
    if isinstance(stmt, ast.CreateMaterializedView):
        text = f"CREATE MATERIALIZED VIEW {_table_name(stmt.database, stmt.name)}"
        if stmt.properties:
            text += f" TBLPROPERTIES {_properties(stmt.properties)}"
        return text + f" AS {_query(stmt.query)}"
    if isinstance(stmt, ast.AlterMatViewRebuild):
        return f"ALTER MATERIALIZED VIEW {_table_name(stmt.database, stmt.name)} REBUILD"
    if isinstance(stmt, ast.DropTable):
        kind = "MATERIALIZED VIEW" if stmt.materialized_view else "TABLE"
        return f"DROP {kind} {_table_name(stmt.database, stmt.name)}"
    if isinstance(stmt, ast.Insert):
        text = f"INSERT INTO {_table_name(stmt.table.database, stmt.table.name)}"
        if stmt.columns:
            text += " (" + ", ".join(stmt.columns) + ")"
        if stmt.query is not None:
            return text + f" {_query(stmt.query)}"
        rows = ", ".join("(" + ", ".join(_expr(v) for v in row) + ")" for row in stmt.rows)
        return text + f" VALUES {rows}"
    if isinstance(stmt, ast.Update):
        text = f"UPDATE {_table_ref(stmt.table)} SET {_assignments(stmt.assignments)}"
        if stmt.where is not None:
            text += f" WHERE {_expr(stmt.where)}"
        return text
    if isinstance(stmt, ast.Delete):
        text = f"DELETE FROM {_table_ref(stmt.table)}"
        if stmt.where is not None:
            text += f" WHERE {_expr(stmt.where)}"
        return text
    if isinstance(stmt, ast.Merge):
        text = (f"MERGE INTO {_table_ref(stmt.target)} USING {_table_ref(stmt.source)}"
                f" ON {_expr(stmt.on)}")
        if stmt.update_assignments:
            text += " WHEN MATCHED"
            if stmt.update_condition is not None:
                text += f" AND {_expr(stmt.update_condition)}"
            text += f" THEN UPDATE SET {_assignments(stmt.update_assignments)}"
        if stmt.delete:
            text += " WHEN MATCHED"
            if stmt.delete_condition is not None:
                text += f" AND {_expr(stmt.delete_condition)}"
            text += " THEN DELETE"
        if stmt.insert_values:
            text += " WHEN NOT MATCHED THEN INSERT"
            if stmt.insert_columns:
                text += " (" + ", ".join(stmt.insert_columns) + ")"
            text += " VALUES (" + ", ".join(_expr(v) for v in stmt.insert_values) + ")"
        return text
    if isinstance(stmt, ast.SetConfig):
        v = stmt.value
        if isinstance(v, bool):
            value = "TRUE" if v else "FALSE"
        elif isinstance(v, (int, float)):
            value = repr(v)
        else:
            value = _quote(str(v))
        return f"SET {stmt.key} = {value}"
    if isinstance(stmt, ast.CreateResourcePlan):
        return f"CREATE RESOURCE PLAN {stmt.name}"
    if isinstance(stmt, ast.CreatePool):
        return (f"CREATE POOL {stmt.plan}.{stmt.pool} WITH "
                f"alloc_fraction = {stmt.alloc_fraction!r}, "
                f"query_parallelism = {stmt.query_parallelism}")
    if isinstance(stmt, ast.CreateRule):
        text = (f"CREATE RULE {stmt.name} IN {stmt.plan} "
                f"WHEN {stmt.metric} {stmt.op} {stmt.value} THEN {stmt.action}")
        if stmt.target_pool:
            text += f" {stmt.target_pool}"
        return text
    if isinstance(stmt, ast.AddRuleToPool):
        return f"ADD RULE {stmt.rule} TO {stmt.pool}"
    if isinstance(stmt, ast.CreateMapping):
        key = stmt.key if stmt.key.isidentifier() else _quote(stmt.key)
        return f"CREATE {stmt.kind} MAPPING {key} IN {stmt.plan} TO {stmt.pool}"
    if isinstance(stmt, ast.AlterPlanDefaultPool):
        return f"ALTER PLAN {stmt.plan} SET DEFAULT POOL = {stmt.pool}"
    if isinstance(stmt, ast.AlterResourcePlan):
        words = [w for w, on in (("ENABLE", stmt.enable), ("ACTIVATE", stmt.activate),
                                 ("DISABLE", stmt.disable)) if on]
        return f"ALTER RESOURCE PLAN {stmt.plan} " + " ".join(words)
    raise TypeError(f"cannot render statement {stmt!r}")
