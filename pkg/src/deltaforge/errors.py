"""Exception hierarchy. Everything raised on purpose derives from DeltaForgeError."""

from __future__ import annotations


class DeltaForgeError(Exception):
    """Base class for engine errors."""


class ParseError(DeltaForgeError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        if line:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class CatalogError(DeltaForgeError):
    pass


class TableNotFound(CatalogError):
    pass


class DuplicateName(CatalogError):
    pass


class InvalidSchema(CatalogError):
    pass


class DanglingMaterializedView(CatalogError):
    """Dropping a table that a registered materialized view still reads."""


class MissingStats(CatalogError):
    """No statistics recorded for the requested table or column."""


class TxnError(DeltaForgeError):
    pass


class TxnConflict(TxnError):
    """First-commit-wins validation failed; the transaction was aborted."""


class TxnStateError(TxnError):
    """Operation applied to a transaction not in the required state."""


class LockTimeout(TxnError):
    pass


class StorageError(DeltaForgeError):
    pass


class CorruptFile(StorageError):
    pass


class CorruptDirectoryName(StorageError):
    pass


class CompactionError(DeltaForgeError):
    pass


class NothingToCompact(CompactionError):
    pass


class PlanError(DeltaForgeError):
    pass


class ColumnNotFound(PlanError):
    pass


class AmbiguousColumn(PlanError):
    pass


class ExecutionError(DeltaForgeError):
    pass


class BudgetExceeded(ExecutionError):
    """An operator ran past its memory budget.

    The only executor failure that reexecution is allowed to retry; carries
    whatever per-operator counts were observed before the failure so the
    reoptimizer can correct its estimates.
    """

    def __init__(self, message: str, partial_stats: dict | None = None):
        super().__init__(message)
        self.partial_stats = partial_stats or {}


class QueryKilled(ExecutionError):
    """Workload management killed the query via a trigger rule."""


class CardinalityViolation(ExecutionError):
    """MERGE matched one target row with more than one source row."""


class MatViewError(DeltaForgeError):
    pass


class RebuildInProgress(MatViewError):
    pass


class WorkloadError(DeltaForgeError):
    pass


class FederationError(DeltaForgeError):
    pass


class UnsupportedOperation(DeltaForgeError):
    pass
