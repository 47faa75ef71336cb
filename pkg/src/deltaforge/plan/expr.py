"""Typed evaluation of resolved scalar expressions.

Runtime values mirror the storage types except DECIMAL, which travels as
decimal.Decimal through the pipeline so arithmetic and comparisons stay
exact; scans unscale on the way out and writers rescale on the way in.
NULL follows SQL three-valued logic: comparisons with NULL yield NULL,
AND/OR use Kleene semantics, and a filter keeps a row only on plain True.
Division by zero yields NULL rather than failing the query.
"""

from __future__ import annotations

import datetime as _dt
import math
import random
import time
from decimal import Decimal

from ..errors import PlanError
from ..schema import (
    BOOL,
    FLOAT64,
    INT64,
    STRING,
    TIMESTAMP,
    ColumnType,
    TypeKind,
    timestamp_field,
    timestamp_from_text,
)
from ..sql import ast

AGGREGATE_FUNCS = frozenset({"sum", "count", "min", "max", "avg"})

# functions whose value depends on when the query runs; their presence
# makes a query ineligible for the result cache
VOLATILE_FUNCS = frozenset({"rand", "current_date", "current_timestamp"})

_NUMERIC = (TypeKind.INT64, TypeKind.FLOAT64, TypeKind.DECIMAL)


def ident(ref: ast.ColumnRef) -> str:
    return f"{ref.qualifier}.{ref.name}" if ref.qualifier else ref.name


def is_aggregate_call(e: ast.Expr) -> bool:
    return isinstance(e, ast.FuncCall) and e.name in AGGREGATE_FUNCS


def _children(e: ast.Expr) -> tuple[ast.Expr, ...]:
    if isinstance(e, ast.BinaryOp):
        return (e.left, e.right)
    if isinstance(e, ast.UnaryOp):
        return (e.operand,)
    if isinstance(e, ast.FuncCall):
        return e.args
    if isinstance(e, ast.InExpr):
        return (e.operand, *e.items)
    if isinstance(e, ast.BetweenExpr):
        return (e.operand, e.low, e.high)
    if isinstance(e, ast.IsNullExpr):
        return (e.operand,)
    if isinstance(e, ast.ExtractExpr):
        return (e.operand,)
    return ()


def walk(e: ast.Expr):
    yield e
    for c in _children(e):
        yield from walk(c)


def column_idents(e: ast.Expr) -> set[str]:
    return {ident(n) for n in walk(e) if isinstance(n, ast.ColumnRef)}


def contains_aggregate(e: ast.Expr) -> bool:
    return any(is_aggregate_call(n) for n in walk(e))


def contains_volatile(e: ast.Expr) -> bool:
    return any(
        isinstance(n, ast.FuncCall) and n.name in VOLATILE_FUNCS for n in walk(e)
    )


def collect_aggregates(e: ast.Expr) -> list[ast.FuncCall]:
    out = []
    for n in walk(e):
        if is_aggregate_call(n) and n not in out:
            out.append(n)
    return out


def replace_subtrees(e: ast.Expr, mapping: dict[ast.Expr, ast.Expr]) -> ast.Expr:
    """Structural substitution, outermost match wins."""
    if e in mapping:
        return mapping[e]
    if isinstance(e, ast.BinaryOp):
        return ast.BinaryOp(e.op, replace_subtrees(e.left, mapping),
                            replace_subtrees(e.right, mapping))
    if isinstance(e, ast.UnaryOp):
        return ast.UnaryOp(e.op, replace_subtrees(e.operand, mapping))
    if isinstance(e, ast.FuncCall):
        return ast.FuncCall(e.name, tuple(replace_subtrees(a, mapping) for a in e.args),
                            e.distinct)
    if isinstance(e, ast.InExpr):
        return ast.InExpr(replace_subtrees(e.operand, mapping),
                          tuple(replace_subtrees(i, mapping) for i in e.items), e.negated)
    if isinstance(e, ast.BetweenExpr):
        return ast.BetweenExpr(replace_subtrees(e.operand, mapping),
                               replace_subtrees(e.low, mapping),
                               replace_subtrees(e.high, mapping), e.negated)
    if isinstance(e, ast.IsNullExpr):
        return ast.IsNullExpr(replace_subtrees(e.operand, mapping), e.negated)
    if isinstance(e, ast.ExtractExpr):
        return ast.ExtractExpr(e.part, replace_subtrees(e.operand, mapping))
    return e


def conjuncts(e: ast.Expr | None) -> list[ast.Expr]:
    if e is None:
        return []
    if isinstance(e, ast.BinaryOp) and e.op == "and":
        return conjuncts(e.left) + conjuncts(e.right)
    return [e]


def conjoin(parts: list[ast.Expr]) -> ast.Expr | None:
    if not parts:
        return None
    out = parts[0]
    for p in parts[1:]:
        out = ast.BinaryOp("and", out, p)
    return out


# ----------------------------------------------------------------- typing

_SCALARS = {
    # name: (min_args, max_args)
    "abs": (1, 1),
    "round": (1, 2),
    "floor": (1, 1),
    "ceil": (1, 1),
    "lower": (1, 1),
    "upper": (1, 1),
    "length": (1, 1),
    "concat": (1, None),
    "coalesce": (1, None),
    "rand": (0, 0),
    "current_date": (0, 0),
    "current_timestamp": (0, 0),
}


def _promote(a: ColumnType, b: ColumnType) -> ColumnType:
    if a.kind is TypeKind.FLOAT64 or b.kind is TypeKind.FLOAT64:
        return FLOAT64
    if a.kind is TypeKind.DECIMAL or b.kind is TypeKind.DECIMAL:
        scales = [t.scale or 0 for t in (a, b) if t.kind is TypeKind.DECIMAL]
        return ColumnType(TypeKind.DECIMAL, 38, max(scales))
    return INT64


def _require_numeric(t: ColumnType | None, what: str) -> None:
    if t is not None and t.kind not in _NUMERIC:
        raise PlanError(f"{what} requires a numeric operand, got {t.render()}")


def _comparable(a: ColumnType | None, b: ColumnType | None) -> bool:
    if a is None or b is None:
        return True
    if a.kind in _NUMERIC and b.kind in _NUMERIC:
        return True
    return a.kind is b.kind


def infer_type(e: ast.Expr, env: dict[str, ColumnType]) -> ColumnType | None:
    """Static type of ``e``; None for an untyped NULL literal."""
    if isinstance(e, ast.Literal):
        v = e.value
        if v is None:
            return None
        if isinstance(v, bool):
            return BOOL
        if isinstance(v, int):
            return INT64
        if isinstance(v, float):
            return FLOAT64
        if isinstance(v, Decimal):
            return ColumnType(TypeKind.DECIMAL, 38, max(0, -v.as_tuple().exponent))
        return STRING
    if isinstance(e, ast.ColumnRef):
        key = ident(e)
        if key not in env:
            raise PlanError(f"unknown column {key}")
        return env[key]
    if isinstance(e, ast.BinaryOp):
        if e.op in ("and", "or"):
            return BOOL
        lt = infer_type(e.left, env)
        rt = infer_type(e.right, env)
        if e.op in ("=", "!=", "<", "<=", ">", ">="):
            if not _comparable(lt, rt):
                raise PlanError(
                    f"cannot compare {lt.render()} with {rt.render()}")
            return BOOL
        _require_numeric(lt, f"operator {e.op}")
        _require_numeric(rt, f"operator {e.op}")
        if e.op == "/":
            return FLOAT64
        if lt is None or rt is None:
            return lt or rt
        return _promote(lt, rt)
    if isinstance(e, ast.UnaryOp):
        if e.op == "not":
            return BOOL
        t = infer_type(e.operand, env)
        _require_numeric(t, "unary minus")
        return t or INT64
    if isinstance(e, ast.InExpr):
        t = infer_type(e.operand, env)
        for item in e.items:
            it = infer_type(item, env)
            if not _comparable(t, it):
                raise PlanError(
                    f"IN list item type {it.render()} does not match {t.render()}")
        return BOOL
    if isinstance(e, ast.BetweenExpr):
        t = infer_type(e.operand, env)
        for side in (e.low, e.high):
            st = infer_type(side, env)
            if not _comparable(t, st):
                raise PlanError(
                    f"BETWEEN bound type {st.render()} does not match {t.render()}")
        return BOOL
    if isinstance(e, ast.IsNullExpr):
        infer_type(e.operand, env)
        return BOOL
    if isinstance(e, ast.ExtractExpr):
        t = infer_type(e.operand, env)
        if t is not None and t.kind is not TypeKind.TIMESTAMP:
            raise PlanError(f"EXTRACT requires a TIMESTAMP, got {t.render()}")
        return INT64
    if isinstance(e, ast.FuncCall):
        return _infer_func(e, env)
    if isinstance(e, ast.Star):
        raise PlanError("* is only valid inside COUNT(*) or a select list")
    raise PlanError(f"cannot type expression {e!r}")


def _infer_func(e: ast.FuncCall, env: dict[str, ColumnType]) -> ColumnType | None:
    name = e.name
    if name in AGGREGATE_FUNCS:
        if name == "count":
            return INT64
        if len(e.args) != 1:
            raise PlanError(f"{name.upper()} takes one argument")
        at = infer_type(e.args[0], env)
        if name == "avg":
            _require_numeric(at, "AVG")
            return FLOAT64
        if name == "sum":
            _require_numeric(at, "SUM")
            if at is None:
                return None
            if at.kind is TypeKind.DECIMAL:
                return ColumnType(TypeKind.DECIMAL, 38, at.scale or 0)
            return at
        return at  # min, max
    if name not in _SCALARS:
        raise PlanError(f"unknown function {name}")
    lo, hi = _SCALARS[name]
    if len(e.args) < lo or (hi is not None and len(e.args) > hi):
        raise PlanError(f"{name} takes {lo}{'' if hi == lo else ' or more'} arguments")
    if e.distinct:
        raise PlanError(f"DISTINCT is not valid in {name}")
    arg_types = [infer_type(a, env) for a in e.args]
    if name in ("lower", "upper"):
        return STRING
    if name == "length":
        return INT64
    if name == "concat":
        return STRING
    if name == "coalesce":
        for t in arg_types:
            if t is not None:
                return t
        return None
    if name == "abs":
        _require_numeric(arg_types[0], "ABS")
        return arg_types[0] or INT64
    if name == "round":
        _require_numeric(arg_types[0], "ROUND")
        return arg_types[0] or INT64
    if name in ("floor", "ceil"):
        _require_numeric(arg_types[0], name.upper())
        return INT64
    if name == "rand":
        return FLOAT64
    if name in ("current_date", "current_timestamp"):
        return TIMESTAMP
    raise PlanError(f"unknown function {name}")


def normalize_literals(e: ast.Expr, env: dict[str, ColumnType]) -> ast.Expr:
    """Convert string literals compared against TIMESTAMP columns to
    microsecond values so runtime comparisons are numeric."""

    def ts_lit(lit: ast.Expr, other_t: ColumnType | None) -> ast.Expr:
        if (
            other_t is not None
            and other_t.kind is TypeKind.TIMESTAMP
            and isinstance(lit, ast.Literal)
            and isinstance(lit.value, str)
        ):
            return ast.Literal(timestamp_from_text(lit.value))
        return lit

    def t_of(x: ast.Expr) -> ColumnType | None:
        try:
            return infer_type(x, env)
        except PlanError:
            return None

    if isinstance(e, ast.BinaryOp):
        left = normalize_literals(e.left, env)
        right = normalize_literals(e.right, env)
        if e.op in ("=", "!=", "<", "<=", ">", ">="):
            right = ts_lit(right, t_of(left))
            left = ts_lit(left, t_of(right))
        return ast.BinaryOp(e.op, left, right)
    if isinstance(e, ast.InExpr):
        op = normalize_literals(e.operand, env)
        t = t_of(op)
        return ast.InExpr(op, tuple(ts_lit(normalize_literals(i, env), t)
                                    for i in e.items), e.negated)
    if isinstance(e, ast.BetweenExpr):
        op = normalize_literals(e.operand, env)
        t = t_of(op)
        return ast.BetweenExpr(op, ts_lit(normalize_literals(e.low, env), t),
                               ts_lit(normalize_literals(e.high, env), t), e.negated)
    if isinstance(e, ast.UnaryOp):
        return ast.UnaryOp(e.op, normalize_literals(e.operand, env))
    if isinstance(e, ast.FuncCall):
        return ast.FuncCall(e.name, tuple(normalize_literals(a, env) for a in e.args),
                            e.distinct)
    if isinstance(e, ast.IsNullExpr):
        return ast.IsNullExpr(normalize_literals(e.operand, env), e.negated)
    if isinstance(e, ast.ExtractExpr):
        return ast.ExtractExpr(e.part, normalize_literals(e.operand, env))
    return e


# ---------------------------------------------------------------- folding

def _fold_cmp(op: str, a, b):
    if a is None or b is None:
        return None
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def _fold_arith(op: str, a, b):
    if a is None or b is None:
        return None
    if isinstance(a, Decimal) and isinstance(b, float):
        a = float(a)
    if isinstance(b, Decimal) and isinstance(a, float):
        b = float(b)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    b_f = float(b) if isinstance(b, Decimal) else b
    if b_f == 0:
        return None
    a_f = float(a) if isinstance(a, Decimal) else a
    return a_f / b_f


def fold(e: ast.Expr) -> ast.Expr:
    """Bottom-up constant folding; tautologies reduce to literal booleans."""
    if isinstance(e, ast.BinaryOp):
        left = fold(e.left)
        right = fold(e.right)
        if e.op in ("and", "or"):
            lv = left.value if isinstance(left, ast.Literal) else ...
            rv = right.value if isinstance(right, ast.Literal) else ...
            if e.op == "and":
                if lv is False or rv is False:
                    return ast.Literal(False)
                if lv is True and rv is True:
                    return ast.Literal(True)
                if lv is None and rv is None:
                    return ast.Literal(None)
                if lv is True:
                    return right
                if rv is True:
                    return left
            else:
                if lv is True or rv is True:
                    return ast.Literal(True)
                if lv is False and rv is False:
                    return ast.Literal(False)
                if lv is None and rv is None:
                    return ast.Literal(None)
                if lv is False:
                    return right
                if rv is False:
                    return left
            return ast.BinaryOp(e.op, left, right)
        if isinstance(left, ast.Literal) and isinstance(right, ast.Literal):
            if e.op in ("=", "!=", "<", "<=", ">", ">="):
                try:
                    return ast.Literal(_fold_cmp(e.op, left.value, right.value))
                except TypeError:
                    return ast.BinaryOp(e.op, left, right)
            try:
                return ast.Literal(_fold_arith(e.op, left.value, right.value))
            except (TypeError, OverflowError):
                return ast.BinaryOp(e.op, left, right)
        return ast.BinaryOp(e.op, left, right)
    if isinstance(e, ast.UnaryOp):
        inner = fold(e.operand)
        if isinstance(inner, ast.Literal):
            v = inner.value
            if e.op == "not":
                return ast.Literal(None if v is None else (not v))
            if v is None:
                return ast.Literal(None)
            try:
                return ast.Literal(-v)
            except TypeError:
                return ast.UnaryOp(e.op, inner)
        return ast.UnaryOp(e.op, inner)
    if isinstance(e, ast.InExpr):
        op = fold(e.operand)
        items = tuple(fold(i) for i in e.items)
        if isinstance(op, ast.Literal) and all(isinstance(i, ast.Literal) for i in items):
            if op.value is None:
                return ast.Literal(None)
            vals = [i.value for i in items]
            if op.value in [v for v in vals if v is not None]:
                hit = True
            elif any(v is None for v in vals):
                return ast.Literal(None)
            else:
                hit = False
            return ast.Literal(hit ^ e.negated)
        return ast.InExpr(op, items, e.negated)
    if isinstance(e, ast.BetweenExpr):
        op = fold(e.operand)
        low = fold(e.low)
        high = fold(e.high)
        if all(isinstance(x, ast.Literal) for x in (op, low, high)):
            inner = _fold_cmp("<=", low.value, op.value)
            outer = _fold_cmp("<=", op.value, high.value)
            both = None if (inner is None or outer is None) else (inner and outer)
            return ast.Literal(None if both is None else both ^ e.negated)
        return ast.BetweenExpr(op, low, high, e.negated)
    if isinstance(e, ast.IsNullExpr):
        op = fold(e.operand)
        if isinstance(op, ast.Literal):
            return ast.Literal((op.value is None) ^ e.negated)
        return ast.IsNullExpr(op, e.negated)
    if isinstance(e, ast.ExtractExpr):
        op = fold(e.operand)
        if isinstance(op, ast.Literal):
            if op.value is None:
                return ast.Literal(None)
            if isinstance(op.value, int):
                return ast.Literal(timestamp_field(op.value, e.part))
        return ast.ExtractExpr(e.part, op)
    if isinstance(e, ast.FuncCall) and e.name not in AGGREGATE_FUNCS \
            and e.name not in VOLATILE_FUNCS:
        args = tuple(fold(a) for a in e.args)
        if args and all(isinstance(a, ast.Literal) for a in args):
            try:
                fn = _SCALAR_EVAL[e.name]
                return ast.Literal(fn(*[a.value for a in args]))
            except Exception:
                pass
        return ast.FuncCall(e.name, args, e.distinct)
    return e


# -------------------------------------------------------------- evaluation

def _null_in(*vals) -> bool:
    return any(v is None for v in vals)


def _eval_concat(*args):
    if _null_in(*args):
        return None
    return "".join(str(a) for a in args)


def _eval_round(x, digits=0):
    if _null_in(x, digits):
        return None
    if isinstance(x, Decimal):
        q = Decimal(1).scaleb(-int(digits))
        return x.quantize(q)
    return round(x, int(digits)) if digits else float(round(x))


_SCALAR_EVAL = {
    "abs": lambda x: None if x is None else abs(x),
    "round": _eval_round,
    "floor": lambda x: None if x is None else math.floor(x),
    "ceil": lambda x: None if x is None else math.ceil(x),
    "lower": lambda x: None if x is None else str(x).lower(),
    "upper": lambda x: None if x is None else str(x).upper(),
    "length": lambda x: None if x is None else len(str(x)),
    "concat": _eval_concat,
    "coalesce": lambda *a: next((v for v in a if v is not None), None),
}


def _utc_midnight_micros() -> int:
    now = _dt.datetime.now(_dt.timezone.utc)
    day = now.replace(hour=0, minute=0, second=0, microsecond=0, tzinfo=None)
    return int((day - _dt.datetime(1970, 1, 1)).total_seconds() * 1_000_000)


def compile_expr(e: ast.Expr, layout: dict[str, int]):
    """Compile a resolved expression to a row -> value closure.

    ``layout`` maps column idents to row slots. Aggregate calls must have
    been rewritten to column references before compiling.
    """
    if isinstance(e, ast.Literal):
        v = e.value
        return lambda row: v
    if isinstance(e, ast.ColumnRef):
        key = ident(e)
        if key not in layout:
            raise PlanError(f"column {key} not present in operator input")
        slot = layout[key]
        return lambda row: row[slot]
    if isinstance(e, ast.BinaryOp):
        lf = compile_expr(e.left, layout)
        rf = compile_expr(e.right, layout)
        op = e.op
        if op == "and":
            def _and(row):
                a = lf(row)
                if a is False:
                    return False
                b = rf(row)
                if b is False:
                    return False
                if a is None or b is None:
                    return None
                return True
            return _and
        if op == "or":
            def _or(row):
                a = lf(row)
                if a is True:
                    return True
                b = rf(row)
                if b is True:
                    return True
                if a is None or b is None:
                    return None
                return False
            return _or
        if op in ("=", "!=", "<", "<=", ">", ">="):
            cmp = _fold_cmp
            return lambda row: cmp(op, lf(row), rf(row))
        arith = _fold_arith
        return lambda row: arith(op, lf(row), rf(row))
    if isinstance(e, ast.UnaryOp):
        f = compile_expr(e.operand, layout)
        if e.op == "not":
            def _not(row):
                v = f(row)
                return None if v is None else (not v)
            return _not
        return lambda row: None if (v := f(row)) is None else -v
    if isinstance(e, ast.InExpr):
        f = compile_expr(e.operand, layout)
        item_fns = [compile_expr(i, layout) for i in e.items]
        negated = e.negated

        def _in(row):
            v = f(row)
            if v is None:
                return None
            saw_null = False
            for fn in item_fns:
                item = fn(row)
                if item is None:
                    saw_null = True
                elif _eq(v, item):
                    return not negated
            if saw_null:
                return None
            return negated
        return _in
    if isinstance(e, ast.BetweenExpr):
        f = compile_expr(e.operand, layout)
        lo = compile_expr(e.low, layout)
        hi = compile_expr(e.high, layout)
        negated = e.negated

        def _between(row):
            v = f(row)
            a = _fold_cmp("<=", lo(row), v)
            b = _fold_cmp("<=", v, hi(row))
            if a is None or b is None:
                return None
            return (a and b) ^ negated
        return _between
    if isinstance(e, ast.IsNullExpr):
        f = compile_expr(e.operand, layout)
        negated = e.negated
        return lambda row: (f(row) is None) ^ negated
    if isinstance(e, ast.ExtractExpr):
        f = compile_expr(e.operand, layout)
        part = e.part
        return lambda row: None if (v := f(row)) is None else timestamp_field(v, part)
    if isinstance(e, ast.FuncCall):
        if e.name in AGGREGATE_FUNCS:
            raise PlanError(f"aggregate {e.name.upper()} not rewritten before compile")
        if e.name == "rand":
            return lambda row: random.random()
        if e.name == "current_timestamp":
            now = int(time.time() * 1_000_000)
            return lambda row: now
        if e.name == "current_date":
            today = _utc_midnight_micros()
            return lambda row: today
        fn = _SCALAR_EVAL[e.name]
        arg_fns = [compile_expr(a, layout) for a in e.args]
        return lambda row: fn(*[f(row) for f in arg_fns])
    raise PlanError(f"cannot compile expression {e!r}")


def _eq(a, b):
    try:
        return a == b
    except TypeError:
        return False


def compile_predicate(e: ast.Expr, layout: dict[str, int]):
    """Predicate wrapper: only plain True keeps a row."""
    f = compile_expr(e, layout)
    return lambda row: f(row) is True
