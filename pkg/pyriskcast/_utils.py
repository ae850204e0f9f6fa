"""Internal utilities."""

from __future__ import annotations

import hashlib
import json
from typing import Any, NamedTuple


class YearMonth(NamedTuple):
    """A calendar month."""

    year: int
    month: int

    @classmethod
    def parse(cls, value: str | YearMonth) -> YearMonth:
        """Parse ``"YYYY-MM"``."""
        if isinstance(value, YearMonth):
            return value
        try:
            year_s, month_s = str(value).strip().split("-")
            ym = cls(int(year_s), int(month_s))
        except ValueError:
            raise ValueError(f"expected 'YYYY-MM', got {value!r}") from None
        if not 1 <= ym.month <= 12:
            raise ValueError(f"month out of range in {value!r}")
        return ym

    @classmethod
    def from_ordinal(cls, ordinal: int) -> YearMonth:
        return cls(ordinal // 12, ordinal % 12 + 1)

    @property
    def ordinal(self) -> int:
        return self.year * 12 + self.month - 1

    def shift(self, months: int) -> YearMonth:
        return YearMonth.from_ordinal(self.ordinal + months)

    def __str__(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"


def month_range(start: YearMonth, end: YearMonth) -> tuple[YearMonth, ...]:
    """Inclusive run of consecutive months."""
    return tuple(YearMonth.from_ordinal(o) for o in range(start.ordinal, end.ordinal + 1))


def normalize_region(region: Any) -> str:
    """Region ids are compared as stripped strings."""
    return str(region).strip()


def config_hash(payload: dict[str, Any]) -> str:
    """First 16 hex chars of the sha256 of the canonical JSON dump."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
