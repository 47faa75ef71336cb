"""Per-column statistics: additive counters plus an NDV sketch.

Stats merge commutatively and associatively, so write paths can fold a delta
computed over freshly written rows into whatever the catalog already holds,
in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .hll import HllSketch, sketch_of


@dataclass
class ColumnStats:
    row_count: int = 0
    null_count: int = 0
    min_value: object = None
    max_value: object = None
    ndv_sketch: HllSketch = field(default_factory=HllSketch)

    @classmethod
    def from_values(cls, values) -> "ColumnStats":
        non_null = [v for v in values if v is not None]
        stats = cls(
            row_count=len(values),
            null_count=len(values) - len(non_null),
            min_value=min(non_null) if non_null else None,
            max_value=max(non_null) if non_null else None,
            ndv_sketch=sketch_of(non_null),
        )
        return stats

    def merged(self, other: "ColumnStats") -> "ColumnStats":
        sketch = self.ndv_sketch.copy()
        sketch.merge(other.ndv_sketch)
        return ColumnStats(
            row_count=self.row_count + other.row_count,
            null_count=self.null_count + other.null_count,
            min_value=_combine(min, self.min_value, other.min_value),
            max_value=_combine(max, self.max_value, other.max_value),
            ndv_sketch=sketch,
        )

    def ndv(self) -> int:
        return int(round(self.ndv_sketch.estimate()))

    def copy(self) -> "ColumnStats":
        return ColumnStats(
            self.row_count, self.null_count, self.min_value, self.max_value, self.ndv_sketch.copy()
        )


def _combine(fn, a, b):
    if a is None:
        return b
    if b is None:
        return a
    return fn(a, b)
