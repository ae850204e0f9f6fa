"""Region x month panels: ingest, alignment, expected counts and observed relative risk.

Panels are immutable: arrays are copied on construction and marked read-only,
so one loaded bundle can be shared by every fit of a model grid.

Usage:
    bundle = load_bundle(config.require_data(), config.training_window)
    bundle.risk.rr          # observed RR, regions x months
    bundle.covariate("P")   # CovariatePanel
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from ._utils import YearMonth, month_range, normalize_region
from .exceptions import (
    ContiguityError,
    DataError,
    InsufficientHistoryError,
    RegionMismatchError,
    SchemaError,
)
from .models import AUTOREGRESSIVE_TERM, DataPaths

logger = logging.getLogger(__name__)

CASE_COLUMNS = ("region", "year", "month", "cases")
POPULATION_COLUMNS = ("region", "year", "population")
COVARIATE_COLUMNS = ("region", "year", "month", "value")
NEIGHBOR_COLUMNS = ("region_a", "region_b")
DISTANCE_COLUMNS = ("region_a", "region_b", "km")

# Covariates that describe an ocean basin rather than a region.
REGION_CONSTANT_COVARIATES = frozenset({"s", "enso", "tn", "tna"})

# Added to counts before taking logs for the autoregressive exposure series.
CONTINUITY_CORRECTION = 0.5


def _frozen(values: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class _MonthlyPanel:
    regions: tuple[str, ...]
    months: tuple[YearMonth, ...]

    def _check_axes(self, values: np.ndarray) -> None:
        if values.shape != (len(self.regions), len(self.months)):
            raise DataError(
                f"panel shape {values.shape} does not match "
                f"{len(self.regions)} regions x {len(self.months)} months"
            )
        if len(set(self.regions)) != len(self.regions):
            raise DataError("duplicate region ids in panel")
        ordinals = np.array([m.ordinal for m in self.months])
        if ordinals.size and np.any(np.diff(ordinals) != 1):
            gap = int(np.argmax(np.diff(ordinals) != 1))
            raise ContiguityError(f"months are not contiguous after {self.months[gap]}")

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def n_months(self) -> int:
        return len(self.months)

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(sorted({m.year for m in self.months}))

    def month_index(self, month: YearMonth | str) -> int:
        month = YearMonth.parse(month)
        if not self.months:
            raise KeyError(str(month))
        idx = month.ordinal - self.months[0].ordinal
        if not 0 <= idx < len(self.months):
            raise KeyError(f"month {month} outside panel {self.months[0]}..{self.months[-1]}")
        return idx

    def window_slice(self, start: YearMonth, end: YearMonth) -> slice:
        try:
            return slice(self.month_index(start), self.month_index(end) + 1)
        except KeyError:
            raise DataError(f"window {start}..{end} is not inside the panel months") from None


@dataclass(frozen=True, eq=False)
class CasePanel(_MonthlyPanel):
    """Observed case counts Y_it."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        self._check_axes(counts)
        if counts.size and (np.any(counts < 0) or np.any(counts != np.round(counts))):
            raise DataError("case counts must be non-negative integers")
        object.__setattr__(self, "counts", _frozen(counts, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ExpectedPanel(_MonthlyPanel):
    """Expected counts E_it and the reference rate they were built from."""

    expected: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    rate: float | None = None

    def __post_init__(self) -> None:
        expected = np.asarray(self.expected, dtype=float)
        self._check_axes(expected)
        if not np.all(np.isfinite(expected)) or np.any(expected <= 0):
            raise DataError("expected counts must be finite and positive")
        object.__setattr__(self, "expected", _frozen(expected))

    @property
    def log_expected(self) -> np.ndarray:
        return np.log(self.expected)


@dataclass(frozen=True, eq=False)
class RiskPanel(_MonthlyPanel):
    """Observed relative risk Y_it / E_it."""

    rr: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self) -> None:
        rr = np.asarray(self.rr, dtype=float)
        self._check_axes(rr)
        if np.any(rr < 0) or not np.all(np.isfinite(rr)):
            raise DataError("relative risks must be finite and non-negative")
        object.__setattr__(self, "rr", _frozen(rr))

    def subset(self, months: Sequence[YearMonth]) -> RiskPanel:
        idx = [self.month_index(m) for m in months]
        return RiskPanel(regions=self.regions, months=tuple(months), rr=self.rr[:, idx])


@dataclass(frozen=True, eq=False)
class CovariatePanel(_MonthlyPanel):
    """One named covariate series per region, in ingested units."""

    values: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    name: str = ""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        self._check_axes(values)
        if not np.all(np.isfinite(values)):
            raise DataError(f"covariate {self.name!r} has missing or non-finite values")
        if self.name.lower() in REGION_CONSTANT_COVARIATES and values.size:
            varying = np.flatnonzero(np.ptp(values, axis=0) > 0)
            if varying.size:
                raise DataError(
                    f"covariate {self.name!r} must be identical across regions",
                    field=str(self.months[varying[0]]),
                )
        object.__setattr__(self, "values", _frozen(values))


@dataclass(frozen=True, eq=False)
class PopulationPanel:
    """Yearly population per region; months share their year's value."""

    regions: tuple[str, ...]
    years: tuple[int, ...]
    population: np.ndarray

    def __post_init__(self) -> None:
        population = np.asarray(self.population, dtype=float)
        if population.shape != (len(self.regions), len(self.years)):
            raise DataError(f"population shape {population.shape} does not match regions x years")
        if not np.all(np.isfinite(population)) or np.any(population <= 0):
            raise DataError("population must be finite and positive")
        object.__setattr__(self, "population", _frozen(population))

    def for_months(self, months: Sequence[YearMonth]) -> np.ndarray:
        """Population per (region, month), shape (R, len(months))."""
        index = {y: j for j, y in enumerate(self.years)}
        try:
            cols = [index[m.year] for m in months]
        except KeyError as e:
            raise DataError(f"population does not cover year {e.args[0]}") from None
        return self.population[:, cols]


# --- CSV ingest ---


def _read_csv(path: str | os.PathLike[str], columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError("file not found", file=str(path))
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SchemaError(f"unreadable CSV: {e}", file=str(path)) from None
    df.columns = [str(c).strip() for c in df.columns]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"missing columns {missing}", file=str(path), row=1, field=missing[0])
    df = df[list(columns)].copy()
    for col in columns:
        df[col] = df[col].str.strip()
    return df


def _numeric(df: pd.DataFrame, column: str, path: Path, *, integer: bool = False) -> np.ndarray:
    """Parse a column locale-independently, reporting the first bad row."""
    values = pd.to_numeric(df[column], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if integer:
        bad |= np.isfinite(values) & (values != np.round(values))
    if bad.any():
        i = int(np.argmax(bad))
        raise SchemaError(
            f"invalid {'integer' if integer else 'number'} {df[column].iloc[i]!r}",
            file=str(path),
            row=i + 2,
            field=column,
        )
    return values


def _months_of(df: pd.DataFrame, path: Path) -> np.ndarray:
    years = _numeric(df, "year", path, integer=True).astype(np.int64)
    months = _numeric(df, "month", path, integer=True).astype(np.int64)
    out_of_range = (months < 1) | (months > 12)
    if out_of_range.any():
        i = int(np.argmax(out_of_range))
        raise SchemaError(f"month {months[i]} outside 1-12", file=str(path), row=i + 2, field="month")
    return years * 12 + months - 1


def _check_duplicates(keys: pd.DataFrame, path: Path) -> None:
    dup = keys.duplicated()
    if dup.any():
        i = int(np.argmax(dup.to_numpy()))
        raise SchemaError(
            f"duplicate row for {tuple(keys.iloc[i])}", file=str(path), row=i + 2, field="region"
        )


def _check_regions(found: Iterable[str], expected: Sequence[str], path: Path) -> None:
    found_set, expected_set = set(found), set(expected)
    missing = [r for r in expected if r not in found_set]
    if missing:
        raise RegionMismatchError(f"{path.name} is missing regions", missing, file=str(path))
    extra = sorted(found_set - expected_set)
    if extra:
        raise RegionMismatchError(f"{path.name} has regions absent from the case file", extra, file=str(path))


def read_cases(path: str | os.PathLike[str]) -> CasePanel:
    path = Path(path)
    df = _read_csv(path, CASE_COLUMNS)
    if df.empty:
        raise SchemaError("no case rows", file=str(path))
    df["region"] = df["region"].map(normalize_region)
    ordinal = _months_of(df, path)
    counts = _numeric(df, "cases", path, integer=True)
    negative = counts < 0
    if negative.any():
        i = int(np.argmax(negative))
        raise DataError(f"negative count {int(counts[i])}", file=str(path), row=i + 2, field="cases")
    _check_duplicates(pd.DataFrame({"region": df["region"], "ordinal": ordinal}), path)

    regions = tuple(pd.unique(df["region"]))
    present = np.unique(ordinal)
    full = np.arange(present[0], present[-1] + 1)
    gaps = np.setdiff1d(full, present)
    if gaps.size:
        raise ContiguityError(
            f"months are not contiguous: {YearMonth.from_ordinal(int(gaps[0]))} is absent",
            file=str(path),
            field="month",
        )
    months = month_range(YearMonth.from_ordinal(int(full[0])), YearMonth.from_ordinal(int(full[-1])))

    grid = np.full((len(regions), len(months)), -1, dtype=np.int64)
    ridx = pd.Index(regions).get_indexer(df["region"])
    grid[ridx, ordinal - full[0]] = counts.astype(np.int64)
    holes = np.argwhere(grid < 0)
    if holes.size:
        i, t = holes[0]
        raise DataError(
            f"missing cell for region {regions[i]} in {months[t]}", file=str(path), field="cases"
        )
    logger.info("Loaded cases: %d regions x %d months from %s", len(regions), len(months), path)
    return CasePanel(regions=regions, months=months, counts=grid)


def read_population(path: str | os.PathLike[str], cases: CasePanel) -> PopulationPanel:
    path = Path(path)
    df = _read_csv(path, POPULATION_COLUMNS)
    df["region"] = df["region"].map(normalize_region)
    years = _numeric(df, "year", path, integer=True).astype(np.int64)
    population = _numeric(df, "population", path)
    nonpositive = population <= 0
    if nonpositive.any():
        i = int(np.argmax(nonpositive))
        raise DataError("population must be positive", file=str(path), row=i + 2, field="population")
    _check_duplicates(pd.DataFrame({"region": df["region"], "year": years}), path)
    _check_regions(df["region"], cases.regions, path)

    needed = cases.years
    grid = pd.DataFrame({"region": df["region"], "year": years, "population": population}).pivot(
        index="region", columns="year", values="population"
    )
    missing_years = [y for y in needed if y not in grid.columns]
    if missing_years:
        raise DataError(f"population does not cover year {missing_years[0]}", file=str(path), field="year")
    values = grid.loc[list(cases.regions), list(needed)].to_numpy(dtype=float)
    holes = np.argwhere(~np.isfinite(values))
    if holes.size:
        i, j = holes[0]
        raise DataError(
            f"missing population for region {cases.regions[i]} in {needed[j]}",
            file=str(path),
            field="population",
        )
    return PopulationPanel(regions=cases.regions, years=needed, population=values)


def read_covariate(path: str | os.PathLike[str], cases: CasePanel, name: str | None = None) -> CovariatePanel:
    """Read one covariate file, trimmed to the case months. The file stem is the name."""
    path = Path(path)
    name = name or path.stem
    df = _read_csv(path, COVARIATE_COLUMNS)
    df["region"] = df["region"].map(normalize_region)
    ordinal = _months_of(df, path)
    values = _numeric(df, "value", path)
    _check_duplicates(pd.DataFrame({"region": df["region"], "ordinal": ordinal}), path)
    _check_regions(df["region"], cases.regions, path)

    first = cases.months[0].ordinal
    inside = (ordinal >= first) & (ordinal <= cases.months[-1].ordinal)
    if (~inside).any():
        logger.debug("Dropping %d rows of %s outside the case months", int((~inside).sum()), name)
    grid = np.full((cases.n_regions, cases.n_months), np.nan)
    ridx = pd.Index(cases.regions).get_indexer(df["region"][inside])
    grid[ridx, ordinal[inside] - first] = values[inside]
    holes = np.argwhere(np.isnan(grid))
    if holes.size:
        i, t = holes[0]
        raise DataError(
            f"missing covariate cell for region {cases.regions[i]} in {cases.months[t]}",
            file=str(path),
            field="value",
        )
    return CovariatePanel(regions=cases.regions, months=cases.months, values=grid, name=name)


def load_and_align(
    case_file: str | os.PathLike[str],
    population_file: str | os.PathLike[str],
    covariate_files: Sequence[str | os.PathLike[str]] = (),
) -> tuple[CasePanel, PopulationPanel, list[CovariatePanel]]:
    """Load all panels on the case file's region order and month range."""
    cases = read_cases(case_file)
    population = read_population(population_file, cases)
    covariates = [read_covariate(p, cases) for p in covariate_files]
    names = [c.name for c in covariates]
    if len(set(names)) != len(names) or AUTOREGRESSIVE_TERM in names:
        raise SchemaError(f"covariate names must be unique and must not be {AUTOREGRESSIVE_TERM!r}: {names}")
    return cases, population, covariates


def load_neighbors(path: str | os.PathLike[str], regions: Sequence[str]) -> list[tuple[str, str]]:
    path = Path(path)
    df = _read_csv(path, NEIGHBOR_COLUMNS)
    known = set(regions)
    pairs = []
    for i, (a, b) in enumerate(zip(df["region_a"].map(normalize_region), df["region_b"].map(normalize_region))):
        for col, r in (("region_a", a), ("region_b", b)):
            if r not in known:
                raise DataError(f"unknown region {r!r}", file=str(path), row=i + 2, field=col)
        pairs.append((a, b))
    return pairs


def load_distances(path: str | os.PathLike[str], regions: Sequence[str]) -> np.ndarray:
    """Symmetric km matrix; the upper triangle is enough, the diagonal is zero."""
    path = Path(path)
    df = _read_csv(path, DISTANCE_COLUMNS)
    km = _numeric(df, "km", path)
    index = {r: i for i, r in enumerate(regions)}
    dist = np.full((len(regions), len(regions)), np.nan)
    np.fill_diagonal(dist, 0.0)
    for row, (a, b, d) in enumerate(zip(df["region_a"].map(normalize_region), df["region_b"].map(normalize_region), km)):
        for col, r in (("region_a", a), ("region_b", b)):
            if r not in index:
                raise DataError(f"unknown region {r!r}", file=str(path), row=row + 2, field=col)
        i, j = index[a], index[b]
        for u, v in ((i, j), (j, i)):
            if not np.isnan(dist[u, v]) and dist[u, v] != d:
                raise DataError(f"conflicting distances for {a}-{b}", file=str(path), row=row + 2, field="km")
            dist[u, v] = d
    holes = np.argwhere(np.isnan(dist))
    if holes.size:
        i, j = holes[0]
        raise DataError(f"no distance for pair {regions[i]}-{regions[j]}", file=str(path), field="km")
    return dist


# --- Derived panels ---


def compute_expected_counts(
    cases: CasePanel, pop: PopulationPanel, window: tuple[YearMonth, YearMonth]
) -> ExpectedPanel:
    """E_it = pop_{i,year(t)} * r, with r the single global rate over `window`."""
    if pop.regions != cases.regions:
        raise RegionMismatchError(
            "population and cases disagree on regions", sorted(set(pop.regions) ^ set(cases.regions))
        )
    sl = cases.window_slice(*window)
    population = pop.for_months(cases.months)
    total_cases = float(cases.counts[:, sl].sum())
    if total_cases <= 0:
        raise DataError(f"zero total counts in window {window[0]}..{window[1]}; the rate is degenerate")
    rate = total_cases / float(population[:, sl].sum())
    logger.debug("Reference rate %.6g over %s..%s", rate, window[0], window[1])
    return ExpectedPanel(regions=cases.regions, months=cases.months, expected=population * rate, rate=rate)


def observed_relative_risk(cases: CasePanel, expected: ExpectedPanel) -> RiskPanel:
    if cases.regions != expected.regions or cases.months != expected.months:
        raise DataError("case and expected panels have different shapes")
    return RiskPanel(regions=cases.regions, months=cases.months, rr=cases.counts / expected.expected)


@dataclass(frozen=True, eq=False)
class PanelBundle:
    """Everything a model needs from the data, aligned on one region order and month range."""

    cases: CasePanel
    population: PopulationPanel
    covariates: tuple[CovariatePanel, ...]
    expected: ExpectedPanel
    training_window: tuple[YearMonth, YearMonth]

    def __post_init__(self) -> None:
        for panel in (self.expected, *self.covariates):
            if panel.regions != self.cases.regions or panel.months != self.cases.months:
                raise DataError(f"{type(panel).__name__} is not aligned with the case panel")
        self.cases.window_slice(*self.training_window)

    @classmethod
    def build(
        cls,
        cases: CasePanel,
        population: PopulationPanel,
        covariates: Sequence[CovariatePanel],
        training_window: tuple[YearMonth, YearMonth],
    ) -> PanelBundle:
        expected = compute_expected_counts(cases, population, training_window)
        return cls(cases, population, tuple(covariates), expected, training_window)

    @property
    def regions(self) -> tuple[str, ...]:
        return self.cases.regions

    @property
    def months(self) -> tuple[YearMonth, ...]:
        return self.cases.months

    @cached_property
    def risk(self) -> RiskPanel:
        return observed_relative_risk(self.cases, self.expected)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    def covariate(self, name: str) -> CovariatePanel:
        """A named covariate, or the autoregressive log((Y+0.5)/E) series for ``"rr"``."""
        if name == AUTOREGRESSIVE_TERM:
            series = np.log((self.cases.counts + CONTINUITY_CORRECTION) / self.expected.expected)
            return CovariatePanel(regions=self.regions, months=self.months, values=series, name=name)
        for panel in self.covariates:
            if panel.name == name:
                return panel
        raise DataError(f"unknown covariate {name!r}; loaded: {list(self.covariate_names)}")

    def subset_months(self, start: YearMonth, end: YearMonth) -> PanelBundle:
        """Restrict every panel to start..end. Expected counts keep their rate."""
        sl = self.cases.window_slice(start, end)
        months = self.months[sl]
        train = (
            max(self.training_window[0], start, key=lambda m: m.ordinal),
            min(self.training_window[1], end, key=lambda m: m.ordinal),
        )
        if train[1].ordinal < train[0].ordinal:
            raise InsufficientHistoryError(f"{start}..{end} does not overlap the training window")
        return PanelBundle(
            cases=replace(self.cases, months=months, counts=self.cases.counts[:, sl]),
            population=self.population,
            covariates=tuple(replace(c, months=months, values=c.values[:, sl]) for c in self.covariates),
            expected=replace(self.expected, months=months, expected=self.expected.expected[:, sl]),
            training_window=train,
        )

    def replace_after(
        self,
        cases_after: YearMonth,
        covariates_after: YearMonth,
        case_sentinel: int = 999_999,
        covariate_sentinel: float = 1e6,
    ) -> PanelBundle:
        """Overwrite cases after one month and covariates after another with sentinels."""
        counts = np.array(self.cases.counts)
        t_cases = cases_after.ordinal - self.months[0].ordinal + 1
        counts[:, max(t_cases, 0):] = case_sentinel
        t_cov = covariates_after.ordinal - self.months[0].ordinal + 1
        covariates = []
        for c in self.covariates:
            values = np.array(c.values)
            values[:, max(t_cov, 0):] = covariate_sentinel
            covariates.append(replace(c, values=values))
        return replace(self, cases=replace(self.cases, counts=counts), covariates=tuple(covariates))


def load_bundle(paths: DataPaths, training_window: tuple[YearMonth, YearMonth]) -> PanelBundle:
    cases, population, covariates = load_and_align(paths.cases, paths.population, paths.covariates)
    return PanelBundle.build(cases, population, covariates, training_window)
