"""Column types, table definitions, and value coercion.

Values are plain Python objects: INT64/TIMESTAMP are int, FLOAT64 is float,
BOOL is bool, STRING is str, and DECIMAL(p,s) is an int scaled by 10**s.
TIMESTAMP counts microseconds since the Unix epoch, UTC.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum

from .errors import InvalidSchema


class TypeKind(Enum):
    INT64 = "INT64"
    FLOAT64 = "FLOAT64"
    DECIMAL = "DECIMAL"
    STRING = "STRING"
    BOOL = "BOOL"
    TIMESTAMP = "TIMESTAMP"


@dataclass(frozen=True)
class ColumnType:
    kind: TypeKind
    precision: int | None = None
    scale: int | None = None

    def __post_init__(self):
        if self.kind is TypeKind.DECIMAL:
            if not self.precision or self.scale is None or self.scale < 0:
                raise InvalidSchema("DECIMAL requires precision and scale")
            if self.scale > self.precision:
                raise InvalidSchema("DECIMAL scale exceeds precision")

    def render(self) -> str:
        if self.kind is TypeKind.DECIMAL:
            return f"DECIMAL({self.precision},{self.scale})"
        return self.kind.value

    def __str__(self) -> str:  # pragma: no cover - debugging aid
        return self.render()


INT64 = ColumnType(TypeKind.INT64)
FLOAT64 = ColumnType(TypeKind.FLOAT64)
STRING = ColumnType(TypeKind.STRING)
BOOL = ColumnType(TypeKind.BOOL)
TIMESTAMP = ColumnType(TypeKind.TIMESTAMP)


def decimal_type(precision: int, scale: int) -> ColumnType:
    return ColumnType(TypeKind.DECIMAL, precision, scale)


@dataclass(frozen=True)
class Column:
    name: str
    ctype: ColumnType


@dataclass(frozen=True)
class TableDef:
    """A table as the catalog knows it.

    ``columns`` holds data columns only; partition columns live separately and
    are never stored in data files. ``declared_order`` preserves the user's
    column order across both groups for SELECT * and INSERT positions.
    """

    database: str
    name: str
    columns: tuple[Column, ...]
    partition_columns: tuple[Column, ...] = ()
    handler: str = "native"
    properties: dict[str, str] = field(default_factory=dict)
    declared_order: tuple[str, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.columns] + [c.name for c in self.partition_columns]
        if len(set(names)) != len(names):
            raise InvalidSchema(f"duplicate column name in {self.name}")
        if not names:
            raise InvalidSchema(f"table {self.name} has no columns")
        if not self.declared_order:
            object.__setattr__(self, "declared_order", tuple(names))
        elif set(self.declared_order) != set(names):
            raise InvalidSchema("declared_order does not cover the columns")

    @property
    def qualified_name(self) -> str:
        return f"{self.database}.{self.name}"

    @property
    def is_native(self) -> bool:
        return self.handler == "native"

    @property
    def is_partitioned(self) -> bool:
        return bool(self.partition_columns)

    def logical_columns(self) -> tuple[Column, ...]:
        by_name = {c.name: c for c in self.columns}
        by_name.update({c.name: c for c in self.partition_columns})
        return tuple(by_name[n] for n in self.declared_order)

    def column(self, name: str) -> Column:
        for c in self.logical_columns():
            if c.name == name:
                return c
        raise InvalidSchema(f"no column {name} in {self.qualified_name}")

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.logical_columns())

    def partition_column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.partition_columns)


# A partition key is the tuple of partition-column values in declaration order.
PartitionKey = tuple


def coerce_value(value, ctype: ColumnType):
    """Coerce a Python value to the storage representation for ``ctype``.

    None passes through. Raises InvalidSchema on impossible coercions; the
    frontend surfaces that as a type error on INSERT.
    """
    if value is None:
        return None
    kind = ctype.kind
    if kind is TypeKind.INT64:
        if isinstance(value, bool) or not isinstance(value, (int, float, Decimal)):
            raise InvalidSchema(f"cannot store {value!r} as INT64")
        if isinstance(value, (float, Decimal)):
            if value != int(value):
                raise InvalidSchema(f"cannot store {value!r} as INT64")
            value = int(value)
        return _check_int64(value)
    if kind is TypeKind.FLOAT64:
        if isinstance(value, bool) or not isinstance(value, (int, float, Decimal)):
            raise InvalidSchema(f"cannot store {value!r} as FLOAT64")
        return float(value)
    if kind is TypeKind.DECIMAL:
        scale = ctype.scale or 0
        if isinstance(value, bool):
            raise InvalidSchema("cannot store BOOL as DECIMAL")
        if isinstance(value, Decimal):
            scaled = value.scaleb(scale)
            if scaled != int(scaled):
                raise InvalidSchema(
                    f"cannot store {value!r} as DECIMAL({ctype.precision},{scale})")
            return _check_int64(int(scaled))
        if isinstance(value, int):
            return _check_int64(value * 10**scale)
        if isinstance(value, float):
            return _check_int64(round(value * 10**scale))
        if isinstance(value, str):
            return _check_int64(round(float(value) * 10**scale))
        raise InvalidSchema(f"cannot store {value!r} as DECIMAL")
    if kind is TypeKind.STRING:
        if not isinstance(value, str):
            raise InvalidSchema(f"cannot store {value!r} as STRING")
        return value
    if kind is TypeKind.BOOL:
        if not isinstance(value, bool):
            raise InvalidSchema(f"cannot store {value!r} as BOOL")
        return value
    if kind is TypeKind.TIMESTAMP:
        if isinstance(value, bool):
            raise InvalidSchema("cannot store BOOL as TIMESTAMP")
        if isinstance(value, int):
            return _check_int64(value)
        if isinstance(value, str):
            return timestamp_from_text(value)
        raise InvalidSchema(f"cannot store {value!r} as TIMESTAMP")
    raise InvalidSchema(f"unknown type {ctype}")


_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1


def _check_int64(v: int) -> int:
    if v < _INT64_MIN or v > _INT64_MAX:
        raise InvalidSchema(f"integer {v} out of INT64 range")
    return v


_EPOCH = _dt.datetime(1970, 1, 1)


def timestamp_from_text(text: str) -> int:
    """Parse 'YYYY-MM-DD[ HH:MM:SS[.ffffff]]' to microseconds since epoch."""
    t = text.strip()
    try:
        dt = _dt.datetime.fromisoformat(t)
    except ValueError as exc:
        raise InvalidSchema(f"bad timestamp literal {text!r}") from exc
    if dt.tzinfo is not None:
        dt = dt.astimezone(_dt.timezone.utc).replace(tzinfo=None)
    return int((dt - _EPOCH).total_seconds() * 1_000_000)


def timestamp_to_text(micros: int) -> str:
    dt = _EPOCH + _dt.timedelta(microseconds=micros)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%d %H:%M:%S.%f")
    return dt.strftime("%Y-%m-%d %H:%M:%S")


def timestamp_field(micros: int, part: str) -> int:
    dt = _EPOCH + _dt.timedelta(microseconds=micros)
    part = part.lower()
    if part == "year":
        return dt.year
    if part == "month":
        return dt.month
    if part == "day":
        return dt.day
    if part == "hour":
        return dt.hour
    if part == "minute":
        return dt.minute
    if part == "second":
        return dt.second
    raise InvalidSchema(f"EXTRACT does not support {part!r}")


def render_value(value, ctype: ColumnType) -> str:
    """Display form used by the CLI and by partition directory names."""
    if value is None:
        return "NULL"
    kind = ctype.kind
    if kind is TypeKind.DECIMAL:
        scale = ctype.scale or 0
        if scale == 0:
            return str(value)
        sign = "-" if value < 0 else ""
        mag = abs(value)
        return f"{sign}{mag // 10**scale}.{mag % 10**scale:0{scale}d}"
    if kind is TypeKind.BOOL:
        return "true" if value else "false"
    if kind is TypeKind.TIMESTAMP:
        return timestamp_to_text(value)
    if kind is TypeKind.FLOAT64:
        return repr(value)
    return str(value)
