"""Query planning: resolution, plan construction, optimization, EXPLAIN."""

from .build import build_plan
from .estimator import DEFAULT_ROW_COUNT, Estimator
from .explain import describe_pushed, explain
from .nodes import (
    AggregateNode,
    FilterNode,
    HashJoinNode,
    LimitNode,
    MergeJoinNode,
    OutCol,
    PhysicalPlan,
    PlanNode,
    ProjectNode,
    ReducerNode,
    ScanNode,
    SortNode,
    SpoolNode,
    SpoolScanNode,
    UnionAllNode,
)
from .optimizer import PlannerConfig, optimize, wil_binder
from .resolve import ResolvedStatement, resolve_query
from .semijoin import BloomFilter, bloom_sizing

__all__ = [
    "AggregateNode",
    "BloomFilter",
    "DEFAULT_ROW_COUNT",
    "Estimator",
    "FilterNode",
    "HashJoinNode",
    "LimitNode",
    "MergeJoinNode",
    "OutCol",
    "PhysicalPlan",
    "PlanNode",
    "PlannerConfig",
    "ProjectNode",
    "ReducerNode",
    "ScanNode",
    "SortNode",
    "SpoolNode",
    "SpoolScanNode",
    "UnionAllNode",
    "bloom_sizing",
    "build_plan",
    "describe_pushed",
    "explain",
    "optimize",
    "resolve_query",
    "ResolvedStatement",
    "wil_binder",
]
