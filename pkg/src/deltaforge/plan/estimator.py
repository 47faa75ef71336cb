"""Cardinality estimation over physical plans.

Formulas: scan = row_count x partition fraction x predicate selectivity;
equality 1/NDV, IN k/NDV, range by min/max interpolation, anything else
1/3; join = |L|*|R| / max(NDV_L, NDV_R) per key pair; aggregate =
min(input, product of group-key NDVs); LIMIT caps, UNION ALL sums.

Runtime overrides (reoptimization) are keyed by the node's logical
fingerprint and replace the computed value wherever present. Missing
statistics fall back to documented constants rather than failing.
"""

from __future__ import annotations

from decimal import Decimal

from ..errors import MissingStats
from ..sql import ast
from . import nodes as pn

DEFAULT_ROW_COUNT = 1000.0
UNKNOWN_SELECTIVITY = 1.0 / 3.0


def _num(v) -> float | None:
    if isinstance(v, bool):
        return float(v)
    if isinstance(v, (int, float, Decimal)):
        return float(v)
    return None


def _range_selectivity(lo, hi, smin, smax) -> float | None:
    """Fraction of [smin, smax] covered by [lo, hi]; None when not numeric."""
    fmin, fmax = _num(smin), _num(smax)
    if fmin is None or fmax is None:
        return None
    flo = _num(lo) if lo is not None else fmin
    fhi = _num(hi) if hi is not None else fmax
    if flo is None or fhi is None:
        return None
    span = fmax - fmin
    if span <= 0:
        return 1.0 if flo <= fmin <= fhi else 0.0
    covered = min(fhi, fmax) - max(flo, fmin)
    if covered < 0:
        return 0.0
    return min(1.0, covered / span)


class Estimator:
    def __init__(self, catalog, overrides: dict[str, float] | None = None):
        self.catalog = catalog
        self.overrides = overrides or {}

    # ------------------------------------------------------------ helpers

    def _ndv(self, qname: str, column: str) -> int | None:
        try:
            return max(1, self.catalog.estimate_ndv(qname, column))
        except MissingStats:
            return None

    def _stats(self, qname: str, column: str):
        return self.catalog.table_stats(qname).get(column)

    def _key_ndv(self, subtree: pn.PlanNode, key: ast.Expr) -> int | None:
        if not isinstance(key, ast.ColumnRef) or key.qualifier is None:
            return None
        for n in subtree.walk():
            if isinstance(n, pn.ScanNode) and n.binding == key.qualifier and n.table:
                return self._ndv(n.table.qualified_name, key.name)
        return None

    # ------------------------------------------------- scan selectivity

    def _pushed_selectivity(self, qname: str, pred) -> float:
        name = type(pred).__name__
        col = getattr(pred, "column", None)
        s = self._stats(qname, col) if col else None
        if name == "ColumnPredicate":
            ndv = self._ndv(qname, col)
            if pred.op == "=":
                return 1.0 / ndv if ndv else UNKNOWN_SELECTIVITY
            if pred.op == "!=":
                return 1.0 - 1.0 / ndv if ndv else 1.0 - UNKNOWN_SELECTIVITY
            if s is not None and s.min_value is not None:
                lo = pred.value if pred.op in (">", ">=") else None
                hi = pred.value if pred.op in ("<", "<=") else None
                r = _range_selectivity(lo, hi, s.min_value, s.max_value)
                if r is not None:
                    return r
            return UNKNOWN_SELECTIVITY
        if name == "InPredicate":
            ndv = self._ndv(qname, col)
            if ndv:
                return min(1.0, len(pred.values) / ndv)
            return UNKNOWN_SELECTIVITY
        if name == "RangePredicate":
            if s is not None and s.min_value is not None:
                r = _range_selectivity(pred.lo, pred.hi, s.min_value, s.max_value)
                if r is not None:
                    return r
            return UNKNOWN_SELECTIVITY
        return UNKNOWN_SELECTIVITY

    def _residual_selectivity(self, scan: pn.ScanNode, e: ast.Expr) -> float:
        qname = scan.table.qualified_name if scan.table else None
        if qname is None:
            return UNKNOWN_SELECTIVITY
        if isinstance(e, ast.BinaryOp) and e.op in ("=", "!=", "<", "<=", ">", ">="):
            ref, lit = e.left, e.right
            if isinstance(lit, ast.ColumnRef) and isinstance(ref, ast.Literal):
                ref, lit = lit, ref
            if isinstance(ref, ast.ColumnRef) and isinstance(lit, ast.Literal):
                ndv = self._ndv(qname, ref.name)
                if e.op == "=":
                    return 1.0 / ndv if ndv else UNKNOWN_SELECTIVITY
                if e.op == "!=":
                    return 1.0 - 1.0 / ndv if ndv else 1.0 - UNKNOWN_SELECTIVITY
            return UNKNOWN_SELECTIVITY
        if isinstance(e, ast.InExpr) and not e.negated:
            if isinstance(e.operand, ast.ColumnRef):
                ndv = self._ndv(qname, e.operand.name)
                if ndv:
                    return min(1.0, len(e.items) / ndv)
            return UNKNOWN_SELECTIVITY
        if isinstance(e, ast.IsNullExpr) and isinstance(e.operand, ast.ColumnRef):
            s = self._stats(qname, e.operand.name)
            if s is not None and s.row_count:
                frac = s.null_count / s.row_count
                return 1.0 - frac if e.negated else frac
        return UNKNOWN_SELECTIVITY

    def _scan_rows(self, scan: pn.ScanNode) -> float:
        if scan.table is None:
            return DEFAULT_ROW_COUNT
        qname = scan.table.qualified_name
        base = self.catalog.row_count(qname)
        rows = float(base) if base is not None else DEFAULT_ROW_COUNT
        if scan.partitions is not None and scan.table.is_partitioned:
            total = len(self.catalog.partitions(qname))
            if total:
                rows *= len(scan.partitions) / total
        for p in scan.pushed:
            rows *= self._pushed_selectivity(qname, p)
        for e in scan.residual:
            rows *= self._residual_selectivity(scan, e)
        return rows

    # ------------------------------------------------------------- walk

    def annotate(self, node: pn.PlanNode) -> float:
        """Recursively compute and store estimated_rows for a subtree."""
        for c in node.children:
            self.annotate(c)
        if isinstance(node, pn.ScanNode):
            for r in node.reducers:
                self.annotate(r)
            est = self._scan_rows(node)
        elif isinstance(node, pn.ReducerNode):
            est = node.source.estimated_rows
        elif isinstance(node, pn.FilterNode):
            est = node.children[0].estimated_rows
            est *= UNKNOWN_SELECTIVITY ** len(node.conjuncts)
        elif isinstance(node, (pn.ProjectNode, pn.SortNode, pn.SpoolNode)):
            est = node.children[0].estimated_rows
        elif isinstance(node, pn.SpoolScanNode):
            est = node.spool.child.estimated_rows if node.spool else DEFAULT_ROW_COUNT
        elif isinstance(node, (pn.HashJoinNode, pn.MergeJoinNode)):
            left, right = node.left, node.right
            est = left.estimated_rows * right.estimated_rows
            missing = 0
            for lk, rk in zip(node.left_keys, node.right_keys):
                ln = self._key_ndv(left, lk)
                rn = self._key_ndv(right, rk)
                if ln is None and rn is None:
                    missing += 1
                    continue
                est /= max(ln or 1, rn or 1, 1)
            if missing and node.left_keys:
                # one fallback division regardless of how many keys lack
                # stats; per-key defaults overshoot on composite keys
                est /= max(left.estimated_rows, right.estimated_rows, 1.0)
        elif isinstance(node, pn.AggregateNode):
            inp = node.children[0].estimated_rows
            if not node.group_exprs:
                est = 1.0
            else:
                groups = 1.0
                for g in node.group_exprs:
                    ndv = self._key_ndv(node.children[0], g)
                    groups *= ndv if ndv is not None else max(inp, 1.0)
                est = min(inp, groups)
        elif isinstance(node, pn.LimitNode):
            est = min(node.children[0].estimated_rows, float(node.limit))
        elif isinstance(node, pn.UnionAllNode):
            est = sum(c.estimated_rows for c in node.children)
        else:
            est = node.children[0].estimated_rows if node.children else DEFAULT_ROW_COUNT
        fp = node.fingerprint()
        if fp in self.overrides:
            est = float(self.overrides[fp])
        node.estimated_rows = est
        return est
