from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import TYPE_CHECKING, Any, ClassVar, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ._utils import YearMonth, config_hash, month_range
from .enums import (
    BasisKind,
    FitStatus,
    HyperRole,
    ProximityKind,
    ScoreFlag,
    ScoreSet,
    SpatialStructure,
)
from .exceptions import ConfigError

if TYPE_CHECKING:
    import numpy as np

AUTOREGRESSIVE_TERM = "rr"


# --- Basis configuration ---


class SplineSpec(BaseModel):
    """Knots of a natural cubic spline basis."""

    interior_knots: tuple[float, ...]
    boundary_knots: tuple[float, float]

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_knots(self) -> SplineSpec:
        lo, hi = self.boundary_knots
        if not lo < hi:
            raise ValueError(f"boundary knots must be increasing, got {self.boundary_knots}")
        knots = self.interior_knots
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValueError(f"interior knots must be strictly increasing, got {knots}")
        if knots and not (lo < knots[0] and knots[-1] < hi):
            raise ValueError("interior knots must lie strictly inside the boundary knots")
        return self

    @property
    def df(self) -> int:
        """Columns of the basis (no intercept)."""
        return len(self.interior_knots) + 1

    @classmethod
    def from_quantiles(cls, x: np.ndarray, probs: Sequence[float] = (1 / 3, 2 / 3)) -> SplineSpec:
        """Interior knots at empirical quantiles, boundary knots at the range."""
        import numpy as np

        values = np.asarray(x, dtype=float).ravel()
        interior = np.quantile(values, probs)
        return cls(
            interior_knots=tuple(float(v) for v in interior),
            boundary_knots=(float(values.min()), float(values.max())),
        )


class LagWindow(BaseModel):
    lag_min: int = 3
    lag_max: int = 12

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_order(self) -> LagWindow:
        if not 0 <= self.lag_min <= self.lag_max:
            raise ValueError(f"need 0 <= lag_min <= lag_max, got ({self.lag_min}, {self.lag_max})")
        return self

    @property
    def lags(self) -> np.ndarray:
        import numpy as np

        return np.arange(self.lag_min, self.lag_max + 1)

    @property
    def n_lags(self) -> int:
        return self.lag_max - self.lag_min + 1


# --- Model specification ---


class ModelSpec(BaseModel):
    """One model variant: one row of the comparison table.

    `covariate_names` may include ``"rr"``, the autoregressive log relative risk term.
    """

    name: Optional[str] = None
    basis_kind: BasisKind = BasisKind.LINEAR
    lag_window: LagWindow = Field(default_factory=LagWindow)
    proximity: Optional[ProximityKind] = None
    structure: Optional[SpatialStructure] = None
    covariate_names: tuple[str, ...] = ()
    include_monthly_effect: bool = True
    null_model: bool = False
    d_init: float = Field(1.0, gt=0)
    standardize: bool = True

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_terms(self) -> ModelSpec:
        if self.null_model:
            if self.covariate_names or self.include_monthly_effect or self.structure is not None:
                raise ValueError("null_model excludes covariates, monthly and spatial effects")
            return self
        if not self.covariate_names:
            raise ValueError("covariate_names must be non-empty unless null_model")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise ValueError(f"duplicate covariate names in {self.covariate_names}")
        if self.structure is not None and self.structure.uses_proximity and self.proximity is None:
            raise ValueError(f"structure {self.structure.value} requires a proximity kind")
        if self.structure in (None, SpatialStructure.INDEPENDENT) and self.proximity is not None:
            raise ValueError("proximity is only meaningful for CAR-family structures")
        return self

    @classmethod
    def null(cls) -> ModelSpec:
        return cls(null_model=True, include_monthly_effect=False)

    @property
    def model_id(self) -> str:
        if self.name:
            return self.name
        if self.null_model:
            return "null"
        parts = [self.basis_kind.value]
        if self.structure is not None:
            if self.proximity is not None:
                parts.append(self.proximity.value)
            parts.append(self.structure.value)
        else:
            parts.append("nospatial")
        if (self.lag_window.lag_min, self.lag_window.lag_max) != (3, 12):
            parts.append(f"lag{self.lag_window.lag_min}_{self.lag_window.lag_max}")
        return "-".join(parts)


class HyperParams(BaseModel):
    """Hyperparameters on the log scale. Unused roles stay None."""

    log_kappa: float = 0.0
    log_sigma2_phi: Optional[float] = None
    log_tau_theta: Optional[float] = None
    log_tau_v: Optional[float] = None
    log_d: Optional[float] = None

    model_config = ConfigDict(frozen=True, extra="forbid")

    _FIELDS: ClassVar[dict[HyperRole, str]] = {
        HyperRole.KAPPA: "log_kappa",
        HyperRole.SIGMA2_PHI: "log_sigma2_phi",
        HyperRole.TAU_THETA: "log_tau_theta",
        HyperRole.TAU_V: "log_tau_v",
        HyperRole.D: "log_d",
    }

    def get(self, role: HyperRole) -> float:
        value = getattr(self, self._FIELDS[role])
        if value is None:
            raise KeyError(f"hyperparameter {role.value} is not set")
        return value

    def has(self, role: HyperRole) -> bool:
        return getattr(self, self._FIELDS[role]) is not None

    def replace(self, values: dict[HyperRole, float]) -> HyperParams:
        return self.model_copy(update={self._FIELDS[r]: float(v) for r, v in values.items()})

    def multiplier(self, role: HyperRole) -> float:
        """Precision scale of a prior block (reciprocal for the variance role)."""
        value = self.get(role)
        return math.exp(-value) if role is HyperRole.SIGMA2_PHI else math.exp(value)

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)

    @property
    def sigma2_phi(self) -> float | None:
        return None if self.log_sigma2_phi is None else math.exp(self.log_sigma2_phi)

    @property
    def tau_theta(self) -> float | None:
        return None if self.log_tau_theta is None else math.exp(self.log_tau_theta)

    @property
    def tau_v(self) -> float | None:
        return None if self.log_tau_v is None else math.exp(self.log_tau_v)

    @property
    def d(self) -> float | None:
        return None if self.log_d is None else math.exp(self.log_d)


# --- Run configuration ---


class InferenceConfig(BaseModel):
    """Tolerances, sample counts and seeds for fitting and prediction."""

    newton_tol: float = Field(1e-8, gt=0)
    newton_max_iter: int = Field(100, gt=0)
    simplex_xatol: float = Field(1e-4, gt=0)
    simplex_max_iter: int = Field(400, gt=0)
    n_restarts: int = Field(3, ge=1)
    restart_jitter: float = Field(0.5, ge=0)
    log_hyper_bounds: tuple[float, float] = (-15.0, 15.0)
    fixed_effect_variance: float = Field(1000.0, gt=0)
    hyper_shape: float = Field(1.0, gt=0)
    hyper_rate: float = Field(5e-5, gt=0)
    fix_kappa: Optional[float] = Field(None, gt=0)
    fix_d: bool = False
    n_samples: int = Field(2000, gt=0)
    seed: int = 0
    alpha: float = Field(0.05, gt=0, lt=1)
    carry_forward_theta: bool = False
    baseline_lookback_years: int = Field(5, ge=1)
    workers: int = Field(1, ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")


class GridConfig(BaseModel):
    """Cross product of basis kind, proximity and spatial structure, plus extras."""

    bases: tuple[BasisKind, ...] = (BasisKind.LINEAR, BasisKind.NONLINEAR)
    proximities: tuple[ProximityKind, ...] = (ProximityKind.NEIGHBOR, ProximityKind.DISTANCE)
    structures: tuple[SpatialStructure, ...] = (
        SpatialStructure.ICAR,
        SpatialStructure.PROPER_CAR,
        SpatialStructure.BYM,
    )
    include_independent: bool = True
    lag_window: LagWindow = Field(default_factory=LagWindow)
    covariates: Optional[tuple[str, ...]] = None
    autoregressive: bool = True
    include_monthly_effect: bool = True
    extras: tuple[ModelSpec, ...] = ()

    model_config = ConfigDict(frozen=True, extra="forbid")

    @field_validator("structures")
    @classmethod
    def _car_only(cls, value: tuple[SpatialStructure, ...]) -> tuple[SpatialStructure, ...]:
        if SpatialStructure.INDEPENDENT in value:
            raise ValueError("list the independent structure via include_independent")
        return value

    def expand(self, available_covariates: Sequence[str] = ()) -> list[ModelSpec]:
        """All grid entries in table order: per basis, independent then proximity x structure."""
        names = tuple(self.covariates) if self.covariates is not None else tuple(available_covariates)
        if self.autoregressive and AUTOREGRESSIVE_TERM not in names:
            names = (AUTOREGRESSIVE_TERM,) + names
        common = dict(
            lag_window=self.lag_window,
            covariate_names=names,
            include_monthly_effect=self.include_monthly_effect,
        )
        specs: list[ModelSpec] = []
        if names:
            for basis in self.bases:
                if self.include_independent:
                    specs.append(ModelSpec(basis_kind=basis, structure=SpatialStructure.INDEPENDENT, **common))
                for proximity in self.proximities:
                    for structure in self.structures:
                        specs.append(
                            ModelSpec(basis_kind=basis, proximity=proximity, structure=structure, **common)
                        )
        specs.extend(self.extras)
        seen: set[str] = set()
        for spec in specs:
            if spec.model_id in seen:
                raise ConfigError(f"duplicate model id {spec.model_id!r} in grid")
            seen.add(spec.model_id)
        return specs

    def lag_mins(self) -> list[int]:
        has_core = bool(self.bases) and (self.covariates is None or bool(self.covariates) or self.autoregressive)
        values = [self.lag_window.lag_min] if has_core else []
        values += [e.lag_window.lag_min for e in self.extras if not e.null_model]
        return values


class DataPaths(BaseModel):
    cases: Path
    population: Path
    covariates: tuple[Path, ...] = ()
    neighbors: Optional[Path] = None
    distances: Optional[Path] = None
    geometry: Optional[Path] = None
    geometry_id_key: str = "region"

    model_config = ConfigDict(frozen=True, extra="forbid")

    def resolve_against(self, base: Path) -> DataPaths:
        """Make relative paths relative to `base` (the config file's directory)."""

        def fix(p: Path | None) -> Path | None:
            if p is None or p.is_absolute():
                return p
            return base / p

        return self.model_copy(
            update={
                "cases": fix(self.cases),
                "population": fix(self.population),
                "covariates": tuple(fix(p) for p in self.covariates),
                "neighbors": fix(self.neighbors),
                "distances": fix(self.distances),
                "geometry": fix(self.geometry),
            }
        )


class SimulationConfig(BaseModel):
    """Ground truth for the synthetic-data generator.

    Covariate coefficients act on the standardized series through the linear
    exposure and the default 3-column lag basis, so each tuple has length 3.
    """

    n_regions: int = Field(8, ge=2)
    n_years: int = Field(6, ge=2)
    start_year: int = 2000
    alpha: float = 0.0
    kappa: float = Field(20.0, gt=0)
    base_rate: float = Field(1e-3, gt=0)
    population_range: tuple[float, float] = (5e3, 5e4)
    covariates: dict[str, tuple[float, ...]] = Field(default_factory=lambda: {"x1": (0.15, -0.05, 0.1)})
    noise_covariates: tuple[str, ...] = ()
    covariate_ar: float = Field(0.6, ge=0, lt=1)
    lag_window: LagWindow = Field(default_factory=LagWindow)
    structure: SpatialStructure = SpatialStructure.ICAR
    tau_theta: float = Field(4.0, gt=0)
    tau_v: float = Field(10.0, gt=0)
    d: float = Field(1.0, gt=0)
    sigma2_phi: float = Field(0.05, gt=0)
    include_monthly_effect: bool = True
    cell_km: float = Field(25.0, gt=0)
    seed: int = 0

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_effects(self) -> SimulationConfig:
        lo, hi = self.population_range
        if not 0 < lo <= hi:
            raise ValueError(f"population_range must satisfy 0 < low <= high, got {self.population_range}")
        for name, beta in self.covariates.items():
            if len(beta) != 3:
                raise ValueError(f"covariate {name!r} needs 3 lag-basis coefficients, got {len(beta)}")
        overlap = set(self.covariates) & set(self.noise_covariates)
        if overlap or AUTOREGRESSIVE_TERM in self.covariates or AUTOREGRESSIVE_TERM in self.noise_covariates:
            raise ValueError("covariate names must be unique and must not be 'rr'")
        if self.n_years * 12 <= self.lag_window.lag_max:
            raise ValueError("simulated span must exceed lag_max")
        return self

    @property
    def months(self) -> tuple[YearMonth, ...]:
        start = YearMonth(self.start_year, 1)
        return month_range(start, start.shift(self.n_years * 12 - 1))


class RunConfig(BaseModel):
    """A single pipeline run, loaded from one JSON file.

    Example:
        config = RunConfig.from_file("runs/costa-rica.json")
        config = RunConfig.from_env("runs/costa-rica.json")  # honours PYRISKCAST_* overrides
    """

    data: Optional[DataPaths] = None
    train_start: Optional[str] = None
    train_end: Optional[str] = None
    test_start: Optional[str] = None
    test_end: Optional[str] = None
    grid: GridConfig = Field(default_factory=GridConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    output_dir: Path = Path("out")

    model_config = ConfigDict(frozen=True, extra="forbid")

    @field_validator("train_start", "train_end", "test_start", "test_end")
    @classmethod
    def _month(cls, value: str | None) -> str | None:
        return None if value is None else str(YearMonth.parse(value))

    @model_validator(mode="after")
    def _check_windows(self) -> RunConfig:
        if (self.train_start is None) != (self.train_end is None):
            raise ValueError("train_start and train_end must be given together")
        if (self.test_start is None) != (self.test_end is None):
            raise ValueError("test_start and test_end must be given together")
        if self.train_start is not None:
            start, end = self.training_window
            if end.ordinal < start.ordinal:
                raise ValueError("training window ends before it starts")
        if self.test_start is not None:
            if self.train_end is None:
                raise ValueError("a testing window needs a training window")
            t0, t1 = self.testing_window
            if t0 != self.training_window[1].shift(1):
                raise ValueError(
                    f"testing window must start the month after training ends ({self.training_window[1].shift(1)})"
                )
            if t1.ordinal < t0.ordinal:
                raise ValueError("testing window ends before it starts")
            length = t1.ordinal - t0.ordinal + 1
            for lag_min in self.grid.lag_mins():
                if length > lag_min:
                    raise ValueError(f"testing length {length} exceeds lag_min {lag_min}")
        return self

    @property
    def training_window(self) -> tuple[YearMonth, YearMonth]:
        if self.train_start is None or self.train_end is None:
            raise ConfigError("run configuration has no training window")
        return YearMonth.parse(self.train_start), YearMonth.parse(self.train_end)

    @property
    def testing_window(self) -> tuple[YearMonth, YearMonth]:
        if self.test_start is None or self.test_end is None:
            raise ConfigError("run configuration has no testing window")
        return YearMonth.parse(self.test_start), YearMonth.parse(self.test_end)

    @property
    def test_months(self) -> tuple[YearMonth, ...]:
        return month_range(*self.testing_window)

    def require_data(self) -> DataPaths:
        if self.data is None:
            raise ConfigError("run configuration has no data section")
        return self.data

    def config_hash(self) -> str:
        """Hash of everything except the grid and the worker count.

        Rows are identified by model id, so adding or removing a grid entry
        leaves the other rows unchanged.
        """
        payload = self.model_dump(mode="json", exclude={"grid": True, "output_dir": True, "inference": {"workers"}})
        return config_hash(payload)

    @classmethod
    def from_file(cls, path: str | os.PathLike[str], **overrides) -> RunConfig:
        """Load a JSON run config. Relative data paths resolve against the file's directory."""
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        raw.update(overrides)
        config = cls.parse_config(raw)
        if config.data is not None:
            config = config.model_copy(update={"data": config.data.resolve_against(path.parent)})
        return config

    @classmethod
    def parse_config(cls, raw: dict) -> RunConfig:
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(f"invalid run configuration: {e}") from None

    @classmethod
    def from_env(cls, path: str | os.PathLike[str]) -> RunConfig:
        """Load a config file, then apply PYRISKCAST_* overrides.

        Loads dotenv before reading env vars.
        """
        from dotenv import load_dotenv

        load_dotenv()
        config = cls.from_file(path)
        inference: dict = {}
        if workers := os.getenv("PYRISKCAST_WORKERS"):
            inference["workers"] = workers
        if seed := os.getenv("PYRISKCAST_SEED"):
            inference["seed"] = seed
        update: dict = {}
        if inference:
            raw = config.inference.model_dump() | inference
            try:
                update["inference"] = InferenceConfig.model_validate(raw)
            except ValidationError as e:
                raise ConfigError(f"invalid PYRISKCAST_* override: {e}") from None
        if output_dir := os.getenv("PYRISKCAST_OUTPUT_DIR"):
            update["output_dir"] = Path(output_dir)
        return config.model_copy(update=update) if update else config


# --- Emitted rows ---


class ComparisonRow(BaseModel):
    """One fitted grid entry."""

    model_id: str
    basis_kind: Optional[BasisKind] = None
    proximity: Optional[ProximityKind] = None
    structure: Optional[SpatialStructure] = None
    status: FitStatus
    dic: Optional[float] = None
    pd: Optional[float] = None
    cv_log_score: Optional[float] = None
    flagged_cpo: Optional[int] = None
    best_dic: bool = False
    best_cv: bool = False
    message: str = ""
    config_hash: str = ""

    model_config = ConfigDict(extra="ignore")


class ForecastRow(BaseModel):
    region: str
    year: int
    month: int
    horizon: int
    rr_mean: float
    rr_lo: float
    rr_hi: float
    cases_mean: float
    cases_lo: float
    cases_hi: float
    config_hash: str = ""

    model_config = ConfigDict(extra="ignore")


class ScoreRow(BaseModel):
    region: str
    set: ScoreSet
    nrmse: Optional[float] = None
    nis: Optional[float] = None
    flag: Optional[ScoreFlag] = None
    config_hash: str = ""

    model_config = ConfigDict(extra="ignore")


class BaselineRow(BaseModel):
    """Naive monthly-mean and NB null-model scores for one region over the test window."""

    region: str
    naive_nrmse: Optional[float] = None
    null_nrmse: Optional[float] = None
    null_nis: Optional[float] = None
    flag: Optional[ScoreFlag] = None
    config_hash: str = ""

    model_config = ConfigDict(extra="ignore")


# --- Persisted artifacts ---


class GeoFeature(BaseModel):
    """A GeoJSON Feature; geometry is passed through untouched."""

    type: str = "Feature"
    geometry: Optional[dict] = None
    properties: dict = Field(default_factory=dict)

    model_config = ConfigDict(extra="allow")

    @field_validator("type")
    @classmethod
    def _feature(cls, value: str) -> str:
        if value != "Feature":
            raise ValueError(f"expected a Feature, got {value!r}")
        return value


class FeatureCollection(BaseModel):
    type: str = "FeatureCollection"
    features: list[GeoFeature] = Field(default_factory=list)
    properties: dict = Field(default_factory=dict)

    model_config = ConfigDict(extra="allow")

    @field_validator("type")
    @classmethod
    def _collection(cls, value: str) -> str:
        if value != "FeatureCollection":
            raise ValueError(f"expected a FeatureCollection, got {value!r}")
        return value

    def by_id(self, key: str = "region") -> dict[str, GeoFeature]:
        """Features keyed by the string value of property `key`."""
        out: dict[str, GeoFeature] = {}
        for feature in self.features:
            if key not in feature.properties:
                raise ValueError(f"feature without {key!r} property")
            out[str(feature.properties[key]).strip()] = feature
        return out


class BlockSummary(BaseModel):
    name: str
    start: int
    size: int


class FitManifest(BaseModel):
    """Contents of ``fit.json``; the latent precision lives next to it in ``precision.mtx``."""

    FORMAT_VERSION: ClassVar[int] = 1

    format_version: int = FORMAT_VERSION
    model_id: str
    spec: ModelSpec
    regions: tuple[str, ...]
    window: tuple[str, str]
    column_names: tuple[str, ...]
    layout: tuple[BlockSummary, ...]
    constraint_shape: tuple[int, int]
    hyper_hat: HyperParams
    latent_mode: list[float]
    log_marginal: float
    converged: bool
    iterations: dict[str, Any]
    gradient_trace: list[float] = Field(default_factory=list)
    dic: Optional[float] = None
    pd: Optional[float] = None
    cv_log_score: Optional[float] = None
    flagged_cpo: Optional[int] = None
    config_hash: str = ""

    model_config = ConfigDict(extra="forbid")


class SimulationTruth(BaseModel):
    """Ground truth written by the generator as ``truth.json``.

    `alpha_effective` is the intercept a fit recovers: the true alpha shifted by
    log(base_rate / rate), since expected counts use the empirical rate.
    """

    seed: int
    regions: tuple[str, ...]
    months: tuple[str, str]
    alpha: float
    alpha_effective: float
    empirical_rate: float
    kappa: float
    covariates: dict[str, tuple[float, ...]]
    noise_covariates: tuple[str, ...] = ()
    standardization: dict[str, tuple[float, float]]
    structure: SpatialStructure
    tau_theta: float
    tau_v: Optional[float] = None
    d: Optional[float] = None
    sigma2_phi: Optional[float] = None
    lag_window: LagWindow
    phi: Optional[list[list[float]]] = None
    theta: list[list[float]]
    v: Optional[list[float]] = None
