"""Recursive-descent parser for the supported SQL subset.

Constructs outside the subset (window functions, correlated subqueries, outer
joins, set operations other than UNION ALL) raise UnsupportedOperation with
the construct named, never a generic syntax error.
"""

from __future__ import annotations

from ..errors import ParseError, UnsupportedOperation
from ..schema import BOOL, FLOAT64, INT64, STRING, TIMESTAMP, ColumnType, decimal_type
from . import ast
from .lexer import EOF, IDENT, KEYWORD, NUMBER, STRING_LIT, SYMBOL, Token, tokenize

_EXTRACT_PARTS = {"year", "month", "day", "hour", "minute", "second"}

_AGG_FUNCS = {"sum", "count", "min", "max", "avg"}

_TYPE_ALIASES = {
    "int": INT64,
    "integer": INT64,
    "bigint": INT64,
    "int64": INT64,
    "smallint": INT64,
    "float": FLOAT64,
    "double": FLOAT64,
    "float64": FLOAT64,
    "real": FLOAT64,
    "string": STRING,
    "text": STRING,
    "bool": BOOL,
    "boolean": BOOL,
    "timestamp": TIMESTAMP,
    "datetime": TIMESTAMP,
}


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0

    # ------------------------------------------------------- token plumbing

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> Token:
        t = self.tokens[self.pos]
        if t.kind != EOF:
            self.pos += 1
        return t

    def at_keyword(self, *words: str) -> bool:
        t = self.peek()
        return t.kind == KEYWORD and t.text in words

    def at_symbol(self, *syms: str) -> bool:
        t = self.peek()
        return t.kind == SYMBOL and t.text in syms

    def accept_keyword(self, *words: str) -> bool:
        if self.at_keyword(*words):
            self.next()
            return True
        return False

    def accept_symbol(self, *syms: str) -> bool:
        if self.at_symbol(*syms):
            self.next()
            return True
        return False

    def error(self, msg: str, token: Token | None = None) -> ParseError:
        t = token or self.peek()
        return ParseError(msg, line=t.line, column=t.column)

    def expect_keyword(self, word: str) -> Token:
        t = self.peek()
        if not self.at_keyword(word):
            raise self.error(f"expected {word.upper()}, found {t.text or 'end of input'!r}")
        return self.next()

    def expect_symbol(self, sym: str) -> Token:
        t = self.peek()
        if not self.at_symbol(sym):
            raise self.error(f"expected {sym!r}, found {t.text or 'end of input'!r}")
        return self.next()

    def ident(self, what: str = "identifier") -> str:
        t = self.peek()
        # contextual keywords are fine as identifiers (e.g. a column named "user")
        if t.kind in (IDENT, KEYWORD):
            self.next()
            return t.text
        raise self.error(f"expected {what}, found {t.text or 'end of input'!r}")

    def strict_ident(self, what: str = "identifier") -> str:
        t = self.peek()
        if t.kind == IDENT:
            self.next()
            return t.text
        raise self.error(f"expected {what}, found {t.text or 'end of input'!r}")

    def string(self) -> str:
        t = self.peek()
        if t.kind != STRING_LIT:
            raise self.error(f"expected string literal, found {t.text or 'end of input'!r}")
        self.next()
        return t.value

    def number(self):
        t = self.peek()
        if t.kind != NUMBER:
            raise self.error(f"expected number, found {t.text or 'end of input'!r}")
        self.next()
        return t.value

    # ----------------------------------------------------------- statements

    def parse_statement(self) -> ast.Statement:
        if self.at_keyword("explain"):
            self.next()
            return ast.Explain(self.parse_statement())
        if self.at_keyword("select") or self.at_symbol("("):
            return self.parse_query()
        if self.at_keyword("create"):
            return self._create()
        if self.at_keyword("alter"):
            return self._alter()
        if self.at_keyword("drop"):
            return self._drop()
        if self.at_keyword("insert"):
            return self._insert()
        if self.at_keyword("update"):
            return self._update()
        if self.at_keyword("delete"):
            return self._delete()
        if self.at_keyword("merge"):
            return self._merge()
        if self.at_keyword("add"):
            return self._add_rule()
        if self.at_keyword("set"):
            return self._set()
        t = self.peek()
        raise self.error(f"cannot parse statement starting with {t.text or 'end of input'!r}")

    # -------------------------------------------------------------- create

    def _create(self):
        self.expect_keyword("create")
        if self.accept_keyword("resource"):
            self.expect_keyword("plan")
            return ast.CreateResourcePlan(self.strict_ident("plan name"))
        if self.accept_keyword("pool"):
            plan = self.strict_ident("plan name")
            self.expect_symbol(".")
            pool = self.strict_ident("pool name")
            self.expect_keyword("with")
            frac = None
            par = None
            while True:
                key = self.ident("pool property")
                self.expect_symbol("=")
                val = self.number()
                if key == "alloc_fraction":
                    frac = float(val)
                elif key == "query_parallelism":
                    par = int(val)
                else:
                    raise self.error(f"unknown pool property {key!r}")
                if not self.accept_symbol(","):
                    break
            if frac is None or par is None:
                raise self.error("pool requires alloc_fraction and query_parallelism")
            return ast.CreatePool(plan, pool, frac, par)
        if self.accept_keyword("rule"):
            name = self.strict_ident("rule name")
            self.expect_keyword("in")
            plan = self.strict_ident("plan name")
            self.expect_keyword("when")
            metric = self.ident("metric name")
            op_t = self.next()
            if op_t.kind != SYMBOL or op_t.text not in (">", ">=", "<", "<=", "="):
                raise self.error("expected comparison operator", op_t)
            value = int(self.number())
            self.expect_keyword("then")
            if self.accept_keyword("kill"):
                return ast.CreateRule(name, plan, metric, op_t.text, value, "KILL")
            self.expect_keyword("move")
            self.accept_keyword("to")
            pool = self.strict_ident("pool name")
            return ast.CreateRule(name, plan, metric, op_t.text, value, "MOVE", pool)
        if self.at_keyword("user", "group", "application"):
            # USER | GROUP | APPLICATION MAPPING <key> IN <plan> TO <pool>
            kind = self.next().text.upper()
            self.expect_keyword("mapping")
            t = self.peek()
            if t.kind == STRING_LIT:
                key = self.string()
            else:
                key = self.ident("mapping key")
            self.expect_keyword("in")
            plan = self.strict_ident("plan name")
            self.expect_keyword("to")
            pool = self.strict_ident("pool name")
            return ast.CreateMapping(kind, key, plan, pool)
        if self.accept_keyword("materialized"):
            self.expect_keyword("view")
            db, name = self._qualified_name()
            props = ()
            if self.at_keyword("tblproperties"):
                props = self._tblproperties()
            self.expect_keyword("as")
            query = self.parse_query()
            return ast.CreateMaterializedView(db, name, query, props)
        external = self.accept_keyword("external")
        self.expect_keyword("table")
        db, name = self._qualified_name()
        columns = ()
        if self.at_symbol("("):
            columns = self._column_spec_list()
        partition_by = ()
        if self.accept_keyword("partitioned"):
            self.expect_keyword("by")
            partition_by = self._column_spec_list()
        stored_by = None
        if self.accept_keyword("stored"):
            self.expect_keyword("by")
            stored_by = self.string()
        props = ()
        if self.at_keyword("tblproperties"):
            props = self._tblproperties()
        if not columns and not external:
            raise self.error("table requires a column list")
        return ast.CreateTable(db, name, tuple(columns), tuple(partition_by),
                               external, stored_by, props)

    def _column_spec_list(self) -> tuple[ast.ColumnSpec, ...]:
        self.expect_symbol("(")
        out = []
        while True:
            name = self.ident("column name")
            out.append(ast.ColumnSpec(name, self._type()))
            if not self.accept_symbol(","):
                break
        self.expect_symbol(")")
        return tuple(out)

    def _type(self) -> ColumnType:
        t = self.peek()
        word = self.ident("type name")
        if word in ("decimal", "numeric"):
            self.expect_symbol("(")
            p = int(self.number())
            self.expect_symbol(",")
            s = int(self.number())
            self.expect_symbol(")")
            return decimal_type(p, s)
        if word in ("varchar", "char"):
            if self.accept_symbol("("):
                self.number()
                self.expect_symbol(")")
            return STRING
        if word in _TYPE_ALIASES:
            return _TYPE_ALIASES[word]
        raise self.error(f"unknown type {word!r}", t)

    def _tblproperties(self) -> tuple[tuple[str, str], ...]:
        self.expect_keyword("tblproperties")
        self.expect_symbol("(")
        out = []
        while True:
            k = self.string()
            self.expect_symbol("=")
            v = self.string()
            out.append((k, v))
            if not self.accept_symbol(","):
                break
        self.expect_symbol(")")
        return tuple(out)

    def _qualified_name(self) -> tuple[str | None, str]:
        first = self.strict_ident("name")
        if self.accept_symbol("."):
            return first, self.strict_ident("name")
        return None, first

    # --------------------------------------------------------------- alter

    def _alter(self):
        self.expect_keyword("alter")
        if self.accept_keyword("materialized"):
            self.expect_keyword("view")
            db, name = self._qualified_name()
            self.expect_keyword("rebuild")
            return ast.AlterMatViewRebuild(db, name)
        if self.accept_keyword("resource"):
            self.expect_keyword("plan")
            plan = self.strict_ident("plan name")
            enable = self.accept_keyword("enable")
            activate = self.accept_keyword("activate")
            disable = self.accept_keyword("disable")
            if not (enable or activate or disable):
                raise self.error("expected ENABLE, ACTIVATE, or DISABLE")
            return ast.AlterResourcePlan(plan, enable=enable, activate=activate, disable=disable)
        if self.accept_keyword("plan"):
            plan = self.strict_ident("plan name")
            self.expect_keyword("set")
            self.expect_keyword("default")
            self.expect_keyword("pool")
            self.expect_symbol("=")
            pool = self.strict_ident("pool name")
            return ast.AlterPlanDefaultPool(plan, pool)
        raise self.error("expected MATERIALIZED VIEW, RESOURCE PLAN, or PLAN after ALTER")

    def _drop(self):
        self.expect_keyword("drop")
        if self.accept_keyword("materialized"):
            self.expect_keyword("view")
            db, name = self._qualified_name()
            return ast.DropTable(db, name, materialized_view=True)
        self.expect_keyword("table")
        db, name = self._qualified_name()
        return ast.DropTable(db, name)

    # ----------------------------------------------------------------- dml

    _JOIN_WORDS = ("left", "right", "full", "outer", "cross")

    def _at_join_prefix(self) -> bool:
        t = self.peek()
        if t.kind != IDENT or t.text not in self._JOIN_WORDS:
            return False
        n = self.peek(1)
        return (n.kind == KEYWORD and n.text == "join") or (
            n.kind == IDENT and n.text == "outer")

    def _table_ref(self) -> ast.TableRef:
        db, name = self._qualified_name()
        alias = None
        if self.accept_keyword("as"):
            alias = self.strict_ident("alias")
        elif self.peek().kind == IDENT and not self._at_join_prefix():
            alias = self.strict_ident("alias")
        return ast.TableRef(db, name, alias)

    def _insert(self):
        self.expect_keyword("insert")
        self.expect_keyword("into")
        self.accept_keyword("table")
        db, name = self._qualified_name()
        table = ast.TableRef(db, name)
        columns = ()
        if self.at_symbol("("):
            self.next()
            cols = [self.ident("column name")]
            while self.accept_symbol(","):
                cols.append(self.ident("column name"))
            self.expect_symbol(")")
            columns = tuple(cols)
        if self.accept_keyword("values"):
            rows = []
            while True:
                self.expect_symbol("(")
                row = [self.parse_expr()]
                while self.accept_symbol(","):
                    row.append(self.parse_expr())
                self.expect_symbol(")")
                rows.append(tuple(row))
                if not self.accept_symbol(","):
                    break
            return ast.Insert(table, columns, tuple(rows))
        query = self.parse_query()
        return ast.Insert(table, columns, (), query)

    def _update(self):
        self.expect_keyword("update")
        table = self._table_ref()
        self.expect_keyword("set")
        assignments = self._assignment_list()
        where = self.parse_expr() if self.accept_keyword("where") else None
        return ast.Update(table, assignments, where)

    def _assignment_list(self) -> tuple[tuple[str, ast.Expr], ...]:
        out = []
        while True:
            col = self.ident("column name")
            if self.accept_symbol("."):
                # target alias qualifier; assignments always land on the target
                col = self.ident("column name")
            self.expect_symbol("=")
            out.append((col, self.parse_expr()))
            if not self.accept_symbol(","):
                break
        return tuple(out)

    def _delete(self):
        self.expect_keyword("delete")
        self.expect_keyword("from")
        table = self._table_ref()
        where = self.parse_expr() if self.accept_keyword("where") else None
        return ast.Delete(table, where)

    def _merge(self):
        self.expect_keyword("merge")
        self.expect_keyword("into")
        target = self._table_ref()
        self.expect_keyword("using")
        if self.at_symbol("("):
            self.next()
            q = self.parse_query()
            self.expect_symbol(")")
            self.accept_keyword("as")
            alias = self.strict_ident("alias")
            source: ast.TableRef | ast.SubqueryRef = ast.SubqueryRef(q, alias)
        else:
            source = self._table_ref()
        self.expect_keyword("on")
        on = self.parse_expr()
        update_assignments: tuple = ()
        update_condition = None
        delete = False
        delete_condition = None
        insert_values: tuple = ()
        insert_columns: tuple = ()
        seen_clause = False
        while self.at_keyword("when"):
            self.next()
            seen_clause = True
            if self.accept_keyword("not"):
                self.expect_keyword("matched")
                self.expect_keyword("then")
                self.expect_keyword("insert")
                if self.at_symbol("("):
                    self.next()
                    cols = [self.ident("column name")]
                    while self.accept_symbol(","):
                        cols.append(self.ident("column name"))
                    self.expect_symbol(")")
                    insert_columns = tuple(cols)
                self.expect_keyword("values")
                self.expect_symbol("(")
                vals = [self.parse_expr()]
                while self.accept_symbol(","):
                    vals.append(self.parse_expr())
                self.expect_symbol(")")
                insert_values = tuple(vals)
                continue
            self.expect_keyword("matched")
            cond = self.parse_expr() if self.accept_keyword("and") else None
            self.expect_keyword("then")
            if self.accept_keyword("delete"):
                delete = True
                delete_condition = cond
                continue
            self.expect_keyword("update")
            self.expect_keyword("set")
            update_assignments = self._assignment_list()
            update_condition = cond
        if not seen_clause:
            raise self.error("MERGE requires at least one WHEN clause")
        return ast.Merge(target, source, on, update_assignments, update_condition,
                         delete, delete_condition, insert_values, insert_columns)

    def _add_rule(self):
        self.expect_keyword("add")
        self.expect_keyword("rule")
        rule = self.strict_ident("rule name")
        self.expect_keyword("to")
        pool = self.strict_ident("pool name")
        return ast.AddRuleToPool(rule, pool)

    def _set(self):
        self.expect_keyword("set")
        parts = [self.ident("config key")]
        while self.accept_symbol("."):
            parts.append(self.ident("config key"))
        self.expect_symbol("=")
        t = self.peek()
        if t.kind == STRING_LIT:
            value: object = self.string()
        elif t.kind == NUMBER:
            value = self.number()
        elif self.accept_keyword("true"):
            value = True
        elif self.accept_keyword("false"):
            value = False
        else:
            value = self.ident("config value")
        return ast.SetConfig(".".join(parts), value)

    # ------------------------------------------------------------- queries

    def parse_query(self) -> ast.Select | ast.UnionAll:
        branches = [self._select_core()]
        while self.at_keyword("union"):
            self.next()
            if not self.accept_keyword("all"):
                raise UnsupportedOperation("UNION DISTINCT is not supported; use UNION ALL")
            branches.append(self._select_core())
        if len(branches) == 1:
            sel = branches[0]
            order_by, limit = self._order_limit()
            if order_by or limit is not None:
                sel = ast.Select(sel.items, sel.from_refs, sel.where, sel.group_by,
                                 sel.having, order_by or sel.order_by,
                                 limit if limit is not None else sel.limit, sel.distinct)
            return sel
        order_by, limit = self._order_limit()
        return ast.UnionAll(tuple(branches), order_by, limit)

    def _order_limit(self):
        order_by = []
        limit = None
        if self.accept_keyword("order"):
            self.expect_keyword("by")
            while True:
                e = self.parse_expr()
                desc = False
                if self.accept_keyword("desc"):
                    desc = True
                else:
                    self.accept_keyword("asc")
                order_by.append((e, desc))
                if not self.accept_symbol(","):
                    break
        if self.accept_keyword("limit"):
            limit = int(self.number())
        return tuple(order_by), limit

    def _select_core(self) -> ast.Select:
        if self.at_symbol("("):
            self.next()
            q = self.parse_query()
            self.expect_symbol(")")
            if not isinstance(q, ast.Select):
                raise UnsupportedOperation("nested UNION ALL requires a derived table alias")
            return q
        self.expect_keyword("select")
        distinct = self.accept_keyword("distinct")
        items = [self._select_item()]
        while self.accept_symbol(","):
            items.append(self._select_item())
        from_refs: list = []
        where = None
        if self.accept_keyword("from"):
            from_refs.append(self._from_item())
            while True:
                if self.accept_symbol(","):
                    from_refs.append(self._from_item())
                    continue
                if self._at_join_prefix():
                    word = self.peek().text
                    if word == "cross":
                        self.next()
                        self.expect_keyword("join")
                        from_refs.append(self._from_item())
                        continue
                    raise UnsupportedOperation(
                        f"{word.upper()} JOIN is not supported; only INNER JOIN")
                if self.at_keyword("inner", "join"):
                    self.accept_keyword("inner")
                    self.expect_keyword("join")
                    ref = self._from_item()
                    self.expect_keyword("on")
                    cond = self.parse_expr()
                    from_refs.append(ref)
                    where = cond if where is None else ast.BinaryOp("and", where, cond)
                    continue
                break
        if self.accept_keyword("where"):
            cond = self.parse_expr()
            where = cond if where is None else ast.BinaryOp("and", where, cond)
        group_by: list = []
        if self.accept_keyword("group"):
            self.expect_keyword("by")
            group_by.append(self.parse_expr())
            while self.accept_symbol(","):
                group_by.append(self.parse_expr())
        having = self.parse_expr() if self.accept_keyword("having") else None
        return ast.Select(tuple(items), tuple(from_refs), where, tuple(group_by),
                          having, (), None, distinct)

    def _select_item(self) -> ast.SelectItem:
        if self.at_symbol("*"):
            self.next()
            return ast.SelectItem(ast.Star())
        # qualified star: alias.*
        if (
            self.peek().kind == IDENT
            and self.peek(1).kind == SYMBOL and self.peek(1).text == "."
            and self.peek(2).kind == SYMBOL and self.peek(2).text == "*"
        ):
            q = self.strict_ident()
            self.next()
            self.next()
            return ast.SelectItem(ast.Star(q))
        e = self.parse_expr()
        alias = None
        if self.accept_keyword("as"):
            alias = self.ident("alias")
        elif self.peek().kind == IDENT:
            alias = self.strict_ident("alias")
        return ast.SelectItem(e, alias)

    def _from_item(self):
        if self.at_symbol("("):
            self.next()
            q = self.parse_query()
            self.expect_symbol(")")
            self.accept_keyword("as")
            alias = self.strict_ident("derived table alias")
            return ast.SubqueryRef(q, alias)
        return self._table_ref()

    # --------------------------------------------------------- expressions

    def parse_expr(self) -> ast.Expr:
        return self._or_expr()

    def _or_expr(self) -> ast.Expr:
        left = self._and_expr()
        while self.at_keyword("or"):
            self.next()
            left = ast.BinaryOp("or", left, self._and_expr())
        return left

    def _and_expr(self) -> ast.Expr:
        left = self._not_expr()
        while self.at_keyword("and"):
            self.next()
            left = ast.BinaryOp("and", left, self._not_expr())
        return left

    def _not_expr(self) -> ast.Expr:
        if self.accept_keyword("not"):
            return ast.UnaryOp("not", self._not_expr())
        return self._comparison()

    def _comparison(self) -> ast.Expr:
        left = self._additive()
        t = self.peek()
        if t.kind == SYMBOL and t.text in ("=", "!=", "<>", "<", "<=", ">", ">="):
            self.next()
            op = "!=" if t.text == "<>" else t.text
            return ast.BinaryOp(op, left, self._additive())
        negated = False
        if self.at_keyword("not") and self.peek(1).kind == KEYWORD and self.peek(1).text in ("in", "between"):
            self.next()
            negated = True
        if self.accept_keyword("in"):
            self.expect_symbol("(")
            if self.at_keyword("select"):
                raise UnsupportedOperation("IN (SELECT ...) subqueries are not supported")
            items = [self.parse_expr()]
            while self.accept_symbol(","):
                items.append(self.parse_expr())
            self.expect_symbol(")")
            return ast.InExpr(left, tuple(items), negated)
        if self.accept_keyword("between"):
            low = self._additive()
            self.expect_keyword("and")
            high = self._additive()
            return ast.BetweenExpr(left, low, high, negated)
        if negated:
            raise self.error("expected IN or BETWEEN after NOT")
        if self.accept_keyword("is"):
            neg = self.accept_keyword("not")
            self.expect_keyword("null")
            return ast.IsNullExpr(left, neg)
        return left

    def _additive(self) -> ast.Expr:
        left = self._multiplicative()
        while self.at_symbol("+", "-"):
            op = self.next().text
            left = ast.BinaryOp(op, left, self._multiplicative())
        return left

    def _multiplicative(self) -> ast.Expr:
        left = self._unary()
        while self.at_symbol("*", "/"):
            op = self.next().text
            left = ast.BinaryOp(op, left, self._unary())
        return left

    def _unary(self) -> ast.Expr:
        if self.at_symbol("-"):
            self.next()
            return ast.UnaryOp("-", self._unary())
        return self._primary()

    def _primary(self) -> ast.Expr:
        t = self.peek()
        if t.kind == NUMBER:
            self.next()
            return ast.Literal(t.value)
        if t.kind == STRING_LIT:
            self.next()
            return ast.Literal(t.value)
        if self.accept_keyword("null"):
            return ast.Literal(None)
        if self.accept_keyword("true"):
            return ast.Literal(True)
        if self.accept_keyword("false"):
            return ast.Literal(False)
        if self.at_keyword("extract"):
            self.next()
            self.expect_symbol("(")
            part = self.ident("date part")
            if part not in _EXTRACT_PARTS:
                raise self.error(f"unknown EXTRACT field {part!r}")
            self.expect_keyword("from")
            operand = self.parse_expr()
            self.expect_symbol(")")
            return ast.ExtractExpr(part, operand)
        if self.at_symbol("("):
            self.next()
            if self.at_keyword("select"):
                raise UnsupportedOperation("scalar subqueries are not supported")
            e = self.parse_expr()
            self.expect_symbol(")")
            return e
        if t.kind == IDENT:
            name = self.strict_ident()
            if self.at_symbol("("):
                self.next()
                distinct = self.accept_keyword("distinct")
                args: list[ast.Expr] = []
                if self.at_symbol("*"):
                    self.next()
                    args.append(ast.Star())
                elif not self.at_symbol(")"):
                    args.append(self.parse_expr())
                    while self.accept_symbol(","):
                        args.append(self.parse_expr())
                self.expect_symbol(")")
                return ast.FuncCall(name, tuple(args), distinct)
            if self.accept_symbol("."):
                col = self.ident("column name")
                return ast.ColumnRef(name, col)
            return ast.ColumnRef(None, name)
        raise self.error(f"cannot parse expression at {t.text or 'end of input'!r}")


def parse_statement(text: str) -> ast.Statement:
    p = _Parser(text)
    stmt = p.parse_statement()
    p.accept_symbol(";")
    t = p.peek()
    if t.kind != EOF:
        raise p.error(f"unexpected trailing input {t.text!r}")
    return stmt


def parse_script(text: str) -> list[ast.Statement]:
    """Split on statement-terminating semicolons and parse each one."""
    p = _Parser(text)
    out = []
    while p.peek().kind != EOF:
        if p.accept_symbol(";"):
            continue
        out.append(p.parse_statement())
        if p.peek().kind != EOF:
            p.expect_symbol(";")
    return out
