"""AST node types for the supported SQL subset.

All nodes are frozen dataclasses so resolved statements hash and compare
structurally; the result cache and shared-work merge both rely on that.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..schema import ColumnType


# ------------------------------------------------------------ expressions

class Expr:
    pass


@dataclass(frozen=True)
class Literal(Expr):
    value: object  # int, float, str, bool, or None


@dataclass(frozen=True)
class ColumnRef(Expr):
    qualifier: str | None
    name: str


@dataclass(frozen=True)
class Star(Expr):
    qualifier: str | None = None


@dataclass(frozen=True)
class FuncCall(Expr):
    name: str
    args: tuple[Expr, ...]
    distinct: bool = False


@dataclass(frozen=True)
class BinaryOp(Expr):
    op: str  # and or = != < <= > >= + - * /
    left: Expr
    right: Expr


@dataclass(frozen=True)
class UnaryOp(Expr):
    op: str  # not, -
    operand: Expr


@dataclass(frozen=True)
class InExpr(Expr):
    operand: Expr
    items: tuple[Expr, ...]
    negated: bool = False


@dataclass(frozen=True)
class BetweenExpr(Expr):
    operand: Expr
    low: Expr
    high: Expr
    negated: bool = False


@dataclass(frozen=True)
class IsNullExpr(Expr):
    operand: Expr
    negated: bool = False


@dataclass(frozen=True)
class ExtractExpr(Expr):
    part: str  # year month day hour minute second
    operand: Expr


# ----------------------------------------------------------------- select

@dataclass(frozen=True)
class SelectItem:
    expr: Expr
    alias: str | None = None


@dataclass(frozen=True)
class TableRef:
    database: str | None
    name: str
    alias: str | None = None

    @property
    def binding(self) -> str:
        return self.alias or self.name


@dataclass(frozen=True)
class SubqueryRef:
    query: "Select | UnionAll"
    alias: str

    @property
    def binding(self) -> str:
        return self.alias


@dataclass(frozen=True)
class Select:
    items: tuple[SelectItem, ...]
    from_refs: tuple = ()  # TableRef | SubqueryRef
    where: Expr | None = None
    group_by: tuple[Expr, ...] = ()
    having: Expr | None = None
    order_by: tuple[tuple[Expr, bool], ...] = ()  # (expr, descending)
    limit: int | None = None
    distinct: bool = False


@dataclass(frozen=True)
class UnionAll:
    branches: tuple[Select, ...]
    order_by: tuple[tuple[Expr, bool], ...] = ()
    limit: int | None = None


# ------------------------------------------------------------- statements

class Statement:
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    ctype: ColumnType


@dataclass(frozen=True)
class CreateTable(Statement):
    database: str | None
    name: str
    columns: tuple[ColumnSpec, ...]
    partition_by: tuple[ColumnSpec, ...] = ()
    external: bool = False
    stored_by: str | None = None
    properties: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class CreateMaterializedView(Statement):
    database: str | None
    name: str
    query: Select
    properties: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class AlterMatViewRebuild(Statement):
    database: str | None
    name: str


@dataclass(frozen=True)
class DropTable(Statement):
    database: str | None
    name: str
    materialized_view: bool = False


@dataclass(frozen=True)
class Insert(Statement):
    table: TableRef
    columns: tuple[str, ...] = ()
    rows: tuple[tuple[Expr, ...], ...] = ()
    query: Select | UnionAll | None = None


@dataclass(frozen=True)
class Update(Statement):
    table: TableRef
    assignments: tuple[tuple[str, Expr], ...]
    where: Expr | None = None


@dataclass(frozen=True)
class Delete(Statement):
    table: TableRef
    where: Expr | None = None


@dataclass(frozen=True)
class Merge(Statement):
    target: TableRef
    source: TableRef | SubqueryRef
    on: Expr
    update_assignments: tuple[tuple[str, Expr], ...] = ()
    update_condition: Expr | None = None
    delete: bool = False
    delete_condition: Expr | None = None
    insert_values: tuple[Expr, ...] = ()
    insert_columns: tuple[str, ...] = ()


@dataclass(frozen=True)
class Explain(Statement):
    statement: Statement


@dataclass(frozen=True)
class SetConfig(Statement):
    key: str
    value: object


# -------------------------------------------------- resource plan DDL

@dataclass(frozen=True)
class CreateResourcePlan(Statement):
    name: str


@dataclass(frozen=True)
class CreatePool(Statement):
    plan: str
    pool: str
    alloc_fraction: float
    query_parallelism: int


@dataclass(frozen=True)
class CreateRule(Statement):
    name: str
    plan: str
    metric: str
    op: str
    value: int
    action: str  # MOVE or KILL
    target_pool: str | None = None


@dataclass(frozen=True)
class AddRuleToPool(Statement):
    rule: str
    pool: str


@dataclass(frozen=True)
class CreateMapping(Statement):
    kind: str  # USER, GROUP, APPLICATION
    key: str
    plan: str
    pool: str


@dataclass(frozen=True)
class AlterPlanDefaultPool(Statement):
    plan: str
    pool: str


@dataclass(frozen=True)
class AlterResourcePlan(Statement):
    plan: str
    enable: bool = False
    activate: bool = False
    disable: bool = False
