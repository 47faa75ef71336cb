"""Stable textual rendering of physical plans.

One node per line, two-space indentation per depth, "est=" carrying the
cardinality estimate with %.6g formatting. Semijoin reducer edges render
underneath their target scan; shared spools render after the root tree.
The same per-node line grammar (minus estimates) produces the remote
query descriptor for federated scans.
"""

from __future__ import annotations

from ..sql.unparse import expr_text
from . import nodes as pn
from .nodes import _pred_text


def _scan_line(n: pn.ScanNode) -> str:
    parts = [f"SCAN {n.table.qualified_name}" if n.table else "SCAN ?"]
    if n.binding and (n.table is None or n.binding != n.table.name):
        parts.append(f"[{n.binding}]")
    if n.partitions is not None:
        parts.append(f"partitions={len(n.partitions)}")
    if n.pushed:
        parts.append("pushed=[" + ", ".join(_pred_text(p) for p in n.pushed) + "]")
    if n.residual:
        parts.append("residual=[" + ", ".join(expr_text(e) for e in n.residual) + "]")
    if n.descriptor:
        parts.append(f"remote=[{n.descriptor}]")
    return " ".join(parts)


def _line(n: pn.PlanNode) -> str:
    if isinstance(n, pn.ScanNode):
        return _scan_line(n)
    if isinstance(n, pn.FilterNode):
        return "FILTER " + " AND ".join(expr_text(e) for e in n.conjuncts)
    if isinstance(n, pn.ProjectNode):
        cols = []
        for e, c in zip(n.exprs, n.schema):
            t = expr_text(e)
            cols.append(t if t == c.name else f"{t} AS {c.name}")
        return "PROJECT " + ", ".join(cols)
    if isinstance(n, pn.HashJoinNode):
        on = ", ".join(f"{expr_text(a)} = {expr_text(b)}"
                       for a, b in zip(n.left_keys, n.right_keys)) or "true"
        return f"HASH_JOIN on {on} build={n.build_side}"
    if isinstance(n, pn.MergeJoinNode):
        on = ", ".join(f"{expr_text(a)} = {expr_text(b)}"
                       for a, b in zip(n.left_keys, n.right_keys))
        return f"MERGE_JOIN on {on}"
    if isinstance(n, pn.AggregateNode):
        g = ", ".join(expr_text(e) for e in n.group_exprs)
        a = ", ".join(expr_text(e) for e in n.agg_calls)
        return f"AGGREGATE group=[{g}] aggs=[{a}]"
    if isinstance(n, pn.SortNode):
        keys = ", ".join(expr_text(e) + (" DESC" if d else "")
                         for e, d in n.keys)
        return "SORT " + keys
    if isinstance(n, pn.LimitNode):
        return f"LIMIT {n.limit}"
    if isinstance(n, pn.UnionAllNode):
        return "UNION_ALL"
    if isinstance(n, pn.SpoolScanNode):
        return f"SPOOL_SCAN {n.spool_id}"
    if isinstance(n, pn.SpoolNode):
        return f"SPOOL {n.spool_id}"
    if isinstance(n, pn.ReducerNode):
        return (f"SEMIJOIN_REDUCER {n.variant} on {n.target_column} "
                f"from {n.source_ident}")
    return n.kind


def describe_pushed(scan: pn.ScanNode) -> str:
    """Remote query descriptor: canonical text of the absorbed pipeline."""
    segments = [f"SCAN {scan.table.qualified_name}" if scan.table else "SCAN ?"]
    for op in scan.absorbed:
        segments.append(_line(op))
    return " | ".join(segments)


def _render(n: pn.PlanNode, depth: int, out: list[str]) -> None:
    out.append("  " * depth + _line(n) + f" est={n.estimated_rows:.6g}")
    if isinstance(n, pn.ScanNode):
        for r in n.reducers:
            out.append("  " * (depth + 1) + _line(r)
                       + f" est={r.estimated_rows:.6g}")
            _render(r.source, depth + 2, out)
    for c in n.children:
        _render(c, depth + 1, out)


def explain(plan: pn.PhysicalPlan | pn.PlanNode) -> str:
    if isinstance(plan, pn.PlanNode):
        plan = pn.PhysicalPlan(plan, ())
    out: list[str] = []
    _render(plan.root, 0, out)
    for s in plan.spools:
        _render(s, 0, out)
    return "\n".join(out)
