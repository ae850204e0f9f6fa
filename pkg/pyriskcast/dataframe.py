"""Optional DataFrame conversion for pyriskcast results.

Requires pandas (a core dependency, imported lazily so the numerics load without it).

Usage:
    # Report builders return DataFrameList - call .to_dataframe() directly:
    df = score_report(...).to_dataframe()
    df = forecast.rows().to_dataframe()

    # Panels convert to long (region, year, month, value) frames:
    from pyriskcast import to_dataframe
    df = to_dataframe(bundle.risk)
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any, Generic, Sequence, SupportsIndex, TypeVar, overload

import numpy as np

if TYPE_CHECKING:
    import pandas as pd

    from .models import ComparisonRow, ScoreRow

T = TypeVar("T")


class DataFrameList(list, Generic[T]):
    """A list subclass with DataFrame conversion support.

    Behaves exactly like a normal list, but adds a .to_dataframe() method
    for convenient conversion to pandas DataFrames.
    """

    @overload
    def __getitem__(self, index: SupportsIndex) -> T: ...
    @overload
    def __getitem__(self, index: slice) -> DataFrameList[T]: ...

    def __getitem__(self, index):  # type: ignore[override]
        result = super().__getitem__(index)
        if isinstance(index, slice):
            return type(self)(result)
        return result

    def to_dataframe(self) -> pd.DataFrame:
        return to_dataframe(self)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({super().__repr__()})"


class ComparisonTable(DataFrameList["ComparisonRow"]):
    """Grid comparison rows, one per model id."""

    def best(self, metric: str = "dic") -> ComparisonRow | None:
        """Row with the smallest finite `metric` among successful fits."""
        scored = [r for r in self if getattr(r, metric) is not None]
        return min(scored, key=lambda r: getattr(r, metric)) if scored else None

    def _repr_html_(self) -> str:
        from ._repr import comparison_html

        return comparison_html(self)


class ScoreReport(DataFrameList["ScoreRow"]):
    """Per-region forecast scores for the training and testing windows."""

    def flagged(self) -> list[str]:
        return [r.region for r in self if r.flag is not None]

    def _repr_html_(self) -> str:
        from ._repr import score_html

        return score_html(self)


def _import_pandas():
    """Lazy import pandas with helpful error message."""
    try:
        import pandas as pd

        return pd
    except ImportError:
        raise ImportError("pandas is required for DataFrame conversion. Install it with: pip install pandas") from None


def to_dataframe(obj: Any) -> pd.DataFrame:
    """Convert a result object or list of result models to a pandas DataFrame.

    Supports:
        - Lists of pydantic rows (ComparisonRow, ForecastRow, ScoreRow, BaselineRow)
        - Monthly panels (CasePanel, RiskPanel, CovariatePanel, ExpectedPanel) in long format
        - Single pydantic models (returns single-row DataFrame)
    """
    pd = _import_pandas()

    from .panel import _MonthlyPanel

    if isinstance(obj, _MonthlyPanel):
        return _panel_to_df(obj, pd)

    if isinstance(obj, Sequence) and not isinstance(obj, (str, bytes)):
        if len(obj) == 0:
            return pd.DataFrame()
        return pd.DataFrame([_extract_data(item) for item in obj])

    return pd.DataFrame([_extract_data(obj)])


def _extract_data(obj: Any) -> dict:
    """Flat dict of one row; enums serialize as their string values."""
    if hasattr(obj, "model_dump"):
        return obj.model_dump(mode="json")
    if isinstance(obj, dict):
        return obj
    raise TypeError(f"Cannot convert {type(obj).__name__} to DataFrame")


_PANEL_VALUES = ("counts", "rr", "expected", "values")


def _panel_to_df(panel: Any, pd) -> pd.DataFrame:
    """Long frame with one row per (region, month), region-major."""
    column = next(name for name in _PANEL_VALUES if hasattr(panel, name))
    values = np.asarray(getattr(panel, column))
    n_regions, n_months = values.shape
    return pd.DataFrame(
        {
            "region": np.repeat(np.array(panel.regions, dtype=object), n_months),
            "year": np.tile([m.year for m in panel.months], n_regions),
            "month": np.tile([m.month for m in panel.months], n_regions),
            getattr(panel, "name", None) or column: values.ravel(),
        }
    )
