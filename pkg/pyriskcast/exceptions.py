from __future__ import annotations

from typing import Any, Sequence

from .enums import ScoreFlag


class RiskcastError(Exception):
    """Base exception for all pyriskcast errors."""

    exit_code: int = 1


class ConfigError(RiskcastError):
    """Raised when a run configuration, generator parameter or model spec is invalid."""

    exit_code = 2


class DataError(RiskcastError):
    """Raised when input data violates its schema or panel invariants.

    Attributes:
        message: Human-readable description.
        file: Path of the offending file, if the data came from disk.
        row: 1-based line number in the file (header is line 1).
        field: Column or cell identifier.
    """

    exit_code = 3

    def __init__(
        self,
        message: str,
        *,
        file: str | None = None,
        row: int | None = None,
        field: str | None = None,
    ):
        parts = [message]
        location = []
        if file:
            location.append(file)
        if row is not None:
            location.append(f"row {row}")
        if field:
            location.append(f"field {field!r}")
        if location:
            parts.append(f"[{', '.join(location)}]")

        super().__init__(" ".join(parts))

        self.message = message
        self.file = file
        self.row = row
        self.field = field

    def __repr__(self) -> str:
        return (
            f"{self.__class__.__name__}("
            f"message={self.message!r}, "
            f"file={self.file!r}, "
            f"row={self.row!r}, "
            f"field={self.field!r})"
        )


class SchemaError(DataError):
    """Raised when a CSV file is unreadable, misses columns or holds unparsable values."""


class RegionMismatchError(DataError):
    """Raised when two inputs disagree on the set of regions.

    Check `regions` for the identifiers present in one input but not the other.
    """

    def __init__(self, message: str, regions: Sequence[str], **kwargs: Any):
        self.regions = tuple(regions)
        super().__init__(f"{message}: {', '.join(self.regions)}", **kwargs)


class ContiguityError(DataError):
    """Raised when the months of a panel have a gap."""


class InsufficientHistoryError(DataError):
    """Raised when a panel is too short for the requested lags or lookback."""


class GeometryMismatchError(RegionMismatchError):
    """Raised when a geometry file lacks a feature for a modeled region."""


class StructureError(RiskcastError):
    """Raised when a proximity graph cannot support the requested spatial structure.

    Attributes:
        components: Connected components (lists of region ids) for disconnected graphs.
    """

    exit_code = 3

    def __init__(self, message: str, *, components: Sequence[Sequence[str]] | None = None):
        self.components = [list(c) for c in components] if components else []
        if self.components:
            listed = "; ".join("{" + ", ".join(c) + "}" for c in self.components)
            message = f"{message}: {listed}"
        super().__init__(message)
        self.message = message


class NumericalError(RiskcastError):
    """Raised when a numerical routine fails.

    Attributes:
        trace: Gradient infinity-norm per Newton iteration, for non-convergence.
        cell: (region, month) label of the offending cell, for CPO overflow.
    """

    exit_code = 4

    def __init__(
        self,
        message: str,
        *,
        trace: Sequence[float] | None = None,
        cell: tuple[str, str] | None = None,
    ):
        self.trace = list(trace) if trace is not None else []
        self.cell = cell
        if cell is not None:
            message = f"{message} at cell {cell[0]} {cell[1]}"
        if self.trace:
            message = f"{message} (gradient norm {self.trace[-1]:.3e} after {len(self.trace)} iterations)"
        super().__init__(message)
        self.message = message

    def __repr__(self) -> str:
        return (
            f"{self.__class__.__name__}("
            f"message={self.message!r}, "
            f"iterations={len(self.trace)}, "
            f"cell={self.cell!r})"
        )


class UndefinedMetricError(RiskcastError):
    """Raised by scoring functions when the observed mean relative risk is zero.

    Report builders catch it and emit `flag` instead of a number.
    """

    def __init__(self, message: str = "observed relative risks are zero"):
        super().__init__(message)
        self.flag = ScoreFlag.UNDEFINED_RR_ZERO
