"""Physical plan operators.

Nodes are plain mutable dataclasses; rewrites build new nodes rather than
mutating shared subtrees. Two canonical hashes serve different purposes:

- fingerprint() identifies the *logical* shape of a subtree. It excludes
  physical choices (join algorithm, build side, semijoin reducers) so that
  runtime row counts recorded against a node during one execution attempt
  can be matched against the freshly built plan of the next attempt.
- merge_key() identifies subtrees that are interchangeable at execution
  time. It includes everything that affects the produced rows plus the
  operator kind, and is what shared-work merging compares.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..schema import ColumnType, TableDef
from ..sql import ast
from ..sql.unparse import expr_text
from ..txn import WriteIdList

SCAN = "SCAN"
FILTER = "FILTER"
PROJECT = "PROJECT"
HASH_JOIN = "HASH_JOIN"
MERGE_JOIN = "MERGE_JOIN"
AGGREGATE = "AGGREGATE"
SORT = "SORT"
LIMIT = "LIMIT"
UNION_ALL = "UNION_ALL"
SEMIJOIN_REDUCER = "SEMIJOIN_REDUCER"
SPOOL = "SPOOL"
SPOOL_SCAN = "SPOOL_SCAN"


@dataclass
class OutCol:
    """One output column: display name, canonical ident, and type."""

    name: str
    ident: str
    ctype: ColumnType | None


def _digest(parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


@dataclass
class PlanNode:
    children: tuple = ()
    schema: tuple[OutCol, ...] = ()
    estimated_rows: float = 0.0

    kind = "NODE"

    def _sig(self, physical: bool) -> list:
        raise NotImplementedError

    def fingerprint(self) -> str:
        return _digest(self._sig(physical=False))

    def merge_key(self) -> str:
        return _digest([self.kind] + self._sig(physical=True))

    def walk(self):
        """Yield this node and all descendants, including reducer sources."""
        yield self
        for c in self.children:
            yield from c.walk()
        for r in getattr(self, "reducers", ()):
            yield from r.walk()


def _pred_text(p) -> str:
    # storage-level predicate; stable textual form for hashing and EXPLAIN
    name = type(p).__name__
    if name == "ColumnPredicate":
        return f"{p.column} {p.op} {p.value!r}"
    if name == "InPredicate":
        return f"{p.column} in {sorted(map(repr, p.values))}"
    if name == "RangePredicate":
        return f"{p.column} in [{p.lo!r}, {p.hi!r}]"
    return f"{p.column} {name}"


@dataclass
class ReducerNode(PlanNode):
    """Semijoin reducer: a filtered source subplan whose values gate a scan.

    variant "partition" prunes the target's partition list dynamically;
    variant "index" installs a min/max range plus a Bloom filter on the
    target column. The payload is computed before the target scan starts.
    """

    source_ident: str = ""
    target_column: str = ""
    variant: str = "index"

    kind = SEMIJOIN_REDUCER

    @property
    def source(self) -> PlanNode:
        return self.children[0]

    def _sig(self, physical: bool) -> list:
        return [self.kind, self.source_ident, self.target_column, self.variant,
                self.source.merge_key()]


@dataclass
class ScanNode(PlanNode):
    table: TableDef | None = None
    binding: str = ""
    wil: WriteIdList | None = None
    partitions: tuple | None = None  # None = all partitions
    projection: tuple[str, ...] = ()
    pushed: tuple = ()  # storage predicates, storage value domain
    residual: tuple[ast.Expr, ...] = ()  # row predicates not pushable exactly
    reducers: tuple[ReducerNode, ...] = ()
    descriptor: str | None = None  # remote query descriptor (federated scans)
    pushed_ops: tuple[str, ...] = ()  # handler-absorbed operator kinds
    absorbed: tuple = ()  # the absorbed plan nodes themselves, bottom-up
    # Rebuild-only visibility overrides; never set on user query plans, so
    # they stay out of the signature.
    as_of: WriteIdList | None = None
    new_rows_baseline: WriteIdList | None = None

    kind = SCAN

    def _sig(self, physical: bool) -> list:
        wfp = self.wil.fingerprint() if self.wil is not None else ""
        parts = [
            SCAN,
            self.table.qualified_name if self.table else "",
            self.binding,
            str(wfp),
            "*" if self.partitions is None else str(sorted(map(str, self.partitions))),
            str(list(self.projection)),
            str(sorted(_pred_text(p) for p in self.pushed)),
            str(sorted(expr_text(e) for e in self.residual)),
            self.descriptor or "",
        ]
        if physical:
            parts.append(str(sorted(str(r._sig(True)) for r in self.reducers)))
        return parts


@dataclass
class FilterNode(PlanNode):
    conjuncts: tuple[ast.Expr, ...] = ()

    kind = FILTER

    def _sig(self, physical: bool) -> list:
        return [FILTER, str(sorted(expr_text(e) for e in self.conjuncts)),
                self.children[0]._sig(physical)]


@dataclass
class ProjectNode(PlanNode):
    exprs: tuple[ast.Expr, ...] = ()

    kind = PROJECT

    def _sig(self, physical: bool) -> list:
        return [PROJECT, str([expr_text(e) for e in self.exprs]),
                str([c.name for c in self.schema]),
                self.children[0]._sig(physical)]


@dataclass
class _JoinBase(PlanNode):
    left_keys: tuple[ast.Expr, ...] = ()
    right_keys: tuple[ast.Expr, ...] = ()

    @property
    def left(self) -> PlanNode:
        return self.children[0]

    @property
    def right(self) -> PlanNode:
        return self.children[1]

    def _sig(self, physical: bool) -> list:
        # deliberately algorithm-neutral: HASH_JOIN and MERGE_JOIN over the
        # same inputs share a fingerprint so reopt overrides survive a flip
        return ["JOIN",
                str([expr_text(e) for e in self.left_keys]),
                str([expr_text(e) for e in self.right_keys]),
                self.left._sig(physical), self.right._sig(physical)]


@dataclass
class HashJoinNode(_JoinBase):
    build_side: str = "right"  # "left" | "right"

    kind = HASH_JOIN


@dataclass
class MergeJoinNode(_JoinBase):
    kind = MERGE_JOIN


@dataclass
class AggregateNode(PlanNode):
    group_exprs: tuple[ast.Expr, ...] = ()
    agg_calls: tuple[ast.FuncCall, ...] = ()

    kind = AGGREGATE

    def _sig(self, physical: bool) -> list:
        return [AGGREGATE,
                str([expr_text(e) for e in self.group_exprs]),
                str([expr_text(a) for a in self.agg_calls]),
                self.children[0]._sig(physical)]


@dataclass
class SortNode(PlanNode):
    keys: tuple[tuple[ast.Expr, bool], ...] = ()  # (expr, descending)

    kind = SORT

    def _sig(self, physical: bool) -> list:
        return [SORT, str([(expr_text(e), d) for e, d in self.keys]),
                self.children[0]._sig(physical)]


@dataclass
class LimitNode(PlanNode):
    limit: int = 0

    kind = LIMIT

    def _sig(self, physical: bool) -> list:
        return [LIMIT, self.limit, self.children[0]._sig(physical)]


@dataclass
class UnionAllNode(PlanNode):
    kind = UNION_ALL

    def _sig(self, physical: bool) -> list:
        return [UNION_ALL] + [c._sig(physical) for c in self.children]


@dataclass
class SpoolNode(PlanNode):
    """A shared subtree materialized once and read by several consumers."""

    spool_id: str = ""

    kind = SPOOL

    @property
    def child(self) -> PlanNode:
        return self.children[0]

    def _sig(self, physical: bool) -> list:
        return [SPOOL, self.child._sig(physical)]


@dataclass
class SpoolScanNode(PlanNode):
    spool_id: str = ""
    spool: SpoolNode | None = field(default=None, repr=False)

    kind = SPOOL_SCAN

    def _sig(self, physical: bool) -> list:
        # identity of the spooled subtree, not of the reference
        return self.spool.child._sig(physical) if self.spool else [SPOOL_SCAN,
                                                                   self.spool_id]


@dataclass
class PhysicalPlan:
    """Optimizer output: a root operator plus any shared spools."""

    root: PlanNode
    spools: tuple[SpoolNode, ...] = ()

    def walk(self):
        yield from self.root.walk()
        for s in self.spools:
            yield from s.walk()
