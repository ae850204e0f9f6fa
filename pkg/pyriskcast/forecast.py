"""Predictive relative-risk forecasts, forecast scores and baseline forecasters."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._utils import YearMonth
from .dataframe import DataFrameList, ScoreReport
from .enums import HyperRole, ScoreSet
from .exceptions import ConfigError, InsufficientHistoryError, UndefinedMetricError
from .infer import PosteriorFit, fit_model, sample_latent
from .model import AssembledModel, assemble, design_rows
from .models import BaselineRow, ForecastRow, InferenceConfig, ModelSpec, ScoreRow
from .panel import PanelBundle, RiskPanel
from .structures import sample_prior

logger = logging.getLogger(__name__)


class HorizonError(ConfigError):
    """Raised when a test month lies further ahead than the smallest covariate lag."""


@dataclass(frozen=True, eq=False)
class ForecastPanel:
    """Predictive summaries per (region, test month), arrays shaped (regions, months)."""

    model_id: str
    regions: tuple[str, ...]
    months: tuple[YearMonth, ...]
    horizons: np.ndarray
    rr_mean: np.ndarray
    rr_lo: np.ndarray
    rr_hi: np.ndarray
    cases_mean: np.ndarray
    cases_lo: np.ndarray
    cases_hi: np.ndarray
    level: float = 0.95

    def rows(self, config_hash: str = "") -> DataFrameList[ForecastRow]:
        out: DataFrameList[ForecastRow] = DataFrameList()
        for i, region in enumerate(self.regions):
            for t, month in enumerate(self.months):
                out.append(
                    ForecastRow(
                        region=region,
                        year=month.year,
                        month=month.month,
                        horizon=int(self.horizons[t]),
                        rr_mean=float(self.rr_mean[i, t]),
                        rr_lo=float(self.rr_lo[i, t]),
                        rr_hi=float(self.rr_hi[i, t]),
                        cases_mean=float(self.cases_mean[i, t]),
                        cases_lo=float(self.cases_lo[i, t]),
                        cases_hi=float(self.cases_hi[i, t]),
                        config_hash=config_hash,
                    )
                )
        return out


def _horizons(model: AssembledModel, bundle: PanelBundle, test_months: Sequence[YearMonth]) -> np.ndarray:
    last = bundle.training_window[1]
    horizons = np.array([m.ordinal - last.ordinal for m in test_months], dtype=int)
    if horizons.size == 0:
        raise ConfigError("no test months requested")
    if np.any(horizons < 1):
        raise ConfigError(f"test months must follow the training window ending {last}")
    if model.recipes:
        lag_min = min(r.window.lag_min for r in model.recipes)
        if horizons.max() > lag_min:
            raise HorizonError(
                f"horizon {int(horizons.max())} exceeds lag_min {lag_min}: covariates would be unobserved"
            )
    return horizons


def _spatial_draws(
    fit: PosteriorFit,
    model: AssembledModel,
    samples: np.ndarray,
    years: np.ndarray,
    region_idx: np.ndarray,
    rng: np.random.Generator,
    carry_forward: bool,
) -> np.ndarray:
    """Yearly spatial effect per (sample, row); new years drawn from the prior at hyper_hat."""
    block = model.layout.get("theta")
    n_regions = len(model.regions)
    out = np.zeros((samples.shape[0], region_idx.size))
    if block is None:
        return out
    fitted_years = {y: k for k, y in enumerate(model.years)}
    new_years: dict[int, np.ndarray] = {}
    for year in sorted(set(int(y) for y in years) - set(fitted_years)):
        if carry_forward:
            k = len(model.years) - 1
            new_years[year] = samples[:, block.start + k * n_regions : block.start + (k + 1) * n_regions]
        else:
            structure = block.structure
            hyper = fit.hyper_hat
            if block.inflated and hyper.has(HyperRole.D):
                structure = structure.with_offset(hyper.d)
            new_years[year] = sample_prior(structure, hyper.multiplier(block.role), rng, samples.shape[0])
    for col, (year, i) in enumerate(zip(years, region_idx)):
        year = int(year)
        if year in fitted_years:
            out[:, col] = samples[:, block.start + fitted_years[year] * n_regions + i]
        else:
            out[:, col] = new_years[year][:, i]
    return out


def predict(
    fit: PosteriorFit,
    model: AssembledModel,
    bundle: PanelBundle,
    test_months: Sequence[YearMonth],
    n_samples: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    carry_forward: bool = False,
) -> ForecastPanel:
    """Predictive RR and count distributions for every region at each test month."""
    test_months = tuple(YearMonth.parse(m) for m in test_months)
    horizons = _horizons(model, bundle, test_months)
    rows = design_rows(model, bundle, test_months)
    samples = sample_latent(fit, n_samples, seed)

    fixed = model.layout.block("fixed")
    lin = samples[:, fixed.index] @ rows.design.T
    phi = model.layout.get("phi")
    if phi is not None:
        calendar = np.array([bundle.months[t].month - 1 for t in rows.month_idx])
        lin += samples[:, phi.start + rows.region_idx * 12 + calendar]
    years = np.array([bundle.months[t].year for t in rows.month_idx])
    prior_rng = np.random.default_rng([seed, 2])
    lin += _spatial_draws(fit, model, samples, years, rows.region_idx, prior_rng, carry_forward)
    v = model.layout.get("v")
    if v is not None:
        lin += samples[:, v.start + rows.region_idx]

    tail = (1.0 - level) / 2.0
    rr = np.exp(lin)
    counts = model.likelihood.sample(rows.offset[None, :] + lin, fit.hyper_hat, np.random.default_rng([seed, 1]))
    shape = (len(bundle.regions), len(test_months))
    rr_lo, rr_hi = np.quantile(rr, [tail, 1.0 - tail], axis=0)
    cases_lo, cases_hi = np.quantile(counts, [tail, 1.0 - tail], axis=0)
    logger.info("Predicted %d months ahead for %s", int(horizons.max()), model.model_id)
    return ForecastPanel(
        model_id=model.model_id,
        regions=bundle.regions,
        months=test_months,
        horizons=horizons,
        rr_mean=rr.mean(axis=0).reshape(shape),
        rr_lo=rr_lo.reshape(shape),
        rr_hi=rr_hi.reshape(shape),
        cases_mean=counts.mean(axis=0).reshape(shape),
        cases_lo=cases_lo.reshape(shape),
        cases_hi=cases_hi.reshape(shape),
        level=level,
    )


# --- Scores ---


def _paired(observed, other) -> tuple[np.ndarray, np.ndarray]:
    obs = np.asarray(observed, dtype=float).ravel()
    oth = np.asarray(other, dtype=float).ravel()
    if obs.size != oth.size or obs.size == 0:
        raise ValueError(f"need equal non-empty lengths, got {obs.size} and {oth.size}")
    return obs, oth


def _mean_observed(observed: np.ndarray) -> float:
    mean = float(observed.mean())
    if mean <= 0:
        raise UndefinedMetricError()
    return mean


def nrmse(observed, predicted) -> float:
    """Root mean squared error normalized by the mean observed relative risk."""
    obs, pred = _paired(observed, predicted)
    mean = _mean_observed(obs)
    return float(np.sqrt(np.sum((obs - pred) ** 2) / (obs.size * mean)))


def normalized_interval_score(observed, lower, upper, alpha: float = 0.05) -> float:
    """Interval width plus 2/(1 - alpha)-scaled exceedances, normalized like nrmse.

    The total is divided by m times the mean observed RR. One cell with RR = 2
    against [0.5, 1.5] at alpha = 0.05 totals 1 + (2 / 0.95) * 0.5 = 2.05263
    before that division, so the returned score is 1.02632.
    """
    obs, lo = _paired(observed, lower)
    _, hi = _paired(observed, upper)
    if np.any(lo > hi):
        raise ValueError("lower limit exceeds upper limit")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    mean = _mean_observed(obs)
    penalty = 2.0 / (1.0 - alpha)
    score = (hi - lo) + penalty * (lo - obs) * (obs < lo) + penalty * (obs - hi) * (obs > hi)
    return float(score.sum() / (obs.size * mean))


def absolute_percentage_error(observed, predicted) -> np.ma.MaskedArray:
    """100 |RR - RRhat| / RR per cell, masked where RR = 0."""
    obs = np.asarray(observed, dtype=float)
    pred = np.asarray(predicted, dtype=float)
    if obs.shape != pred.shape:
        raise ValueError(f"shape mismatch {obs.shape} vs {pred.shape}")
    undefined = obs == 0
    safe = np.where(undefined, 1.0, obs)
    return np.ma.masked_array(100.0 * np.abs(obs - pred) / safe, mask=undefined)


def _complete_years(months: Sequence[YearMonth]) -> list[int]:
    counts: dict[int, int] = {}
    for m in months:
        counts[m.year] = counts.get(m.year, 0) + 1
    return sorted(y for y, n in counts.items() if n == 12)


def naive_monthly_mean(history: RiskPanel, test_months: Sequence[YearMonth], lookback_years: int = 5) -> np.ndarray:
    """Mean observed RR of each calendar month over the last complete years, shape (regions, months)."""
    years = _complete_years(history.months)
    if len(years) < lookback_years:
        raise InsufficientHistoryError(
            f"naive forecast needs {lookback_years} complete years of history, found {len(years)}"
        )
    years = years[-lookback_years:]
    out = np.empty((history.n_regions, len(test_months)))
    for t, month in enumerate(test_months):
        idx = [history.month_index(YearMonth(y, YearMonth.parse(month).month)) for y in years]
        out[:, t] = history.rr[:, idx].mean(axis=1)
    return out


def null_model_forecast(
    bundle: PanelBundle,
    test_months: Sequence[YearMonth],
    config: InferenceConfig | None = None,
) -> ForecastPanel:
    """Fit log RR = alpha on the naive method's lookback window, then predict."""
    config = config or InferenceConfig()
    train = bundle.months[bundle.cases.window_slice(*bundle.training_window)]
    years = _complete_years(train)
    if len(years) < config.baseline_lookback_years:
        raise InsufficientHistoryError(
            f"null model needs {config.baseline_lookback_years} complete training years, found {len(years)}"
        )
    years = years[-config.baseline_lookback_years :]
    window = (YearMonth(years[0], 1), YearMonth(years[-1], 12))
    model = assemble(ModelSpec.null(), bundle, window=window)
    fit = fit_model(model, config)
    return predict(fit, model, bundle, test_months, config.n_samples, config.seed, level=1.0 - config.alpha)


def score_report(
    regions: Sequence[str],
    observed: np.ndarray,
    predicted: np.ndarray,
    lower: np.ndarray | None,
    upper: np.ndarray | None,
    score_set: ScoreSet,
    alpha: float = 0.05,
    config_hash: str = "",
) -> ScoreReport:
    """Per-region NRMSE and NIS over a window, flagging regions with zero observed RR."""
    report = ScoreReport()
    for i, region in enumerate(regions):
        try:
            value = nrmse(observed[i], predicted[i])
            nis = None
            if lower is not None and upper is not None:
                nis = normalized_interval_score(observed[i], lower[i], upper[i], alpha)
            report.append(ScoreRow(region=region, set=score_set, nrmse=value, nis=nis, config_hash=config_hash))
        except UndefinedMetricError as e:
            report.append(ScoreRow(region=region, set=score_set, flag=e.flag, config_hash=config_hash))
    return report


def baseline_report(
    regions: Sequence[str],
    observed: np.ndarray,
    naive: np.ndarray | None,
    null: ForecastPanel | None,
    alpha: float = 0.05,
    config_hash: str = "",
) -> DataFrameList[BaselineRow]:
    """Naive NRMSE and null-model NRMSE/NIS per region; None where a baseline is unavailable."""
    rows: DataFrameList[BaselineRow] = DataFrameList()
    for i, region in enumerate(regions):
        try:
            rows.append(
                BaselineRow(
                    region=region,
                    naive_nrmse=None if naive is None else nrmse(observed[i], naive[i]),
                    null_nrmse=None if null is None else nrmse(observed[i], null.rr_mean[i]),
                    null_nis=None
                    if null is None
                    else normalized_interval_score(observed[i], null.rr_lo[i], null.rr_hi[i], alpha),
                    config_hash=config_hash,
                )
            )
        except UndefinedMetricError as e:
            rows.append(BaselineRow(region=region, flag=e.flag, config_hash=config_hash))
    return rows
