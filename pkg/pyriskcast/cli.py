"""Command-line pipeline: simulate, fit-grid, forecast, map.

Usage:
    pyriskcast simulate --config sim.json --out data/sim
    pyriskcast fit-grid --config data/sim/run.json --out runs/sim
    pyriskcast forecast --config data/sim/run.json --out runs/sim
    pyriskcast map --config data/sim/run.json --out runs/sim --period test

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from ._utils import YearMonth, month_range
from .dataframe import ComparisonTable, ScoreReport
from .enums import FitStatus, ProximityKind, ScoreSet
from .exceptions import (
    ConfigError,
    DataError,
    GeometryMismatchError,
    InsufficientHistoryError,
    RiskcastError,
)
from .forecast import (
    absolute_percentage_error,
    baseline_report,
    naive_monthly_mean,
    null_model_forecast,
    predict,
    score_report,
)
from .infer import diagnostics, fit_model, fitted_relative_risk
from .io import (
    load_fit_bundle,
    read_comparison,
    read_fit_manifest,
    read_geojson,
    write_baselines,
    write_comparison,
    write_fit_bundle,
    write_forecasts,
    write_geojson,
    write_scores,
)
from .model import AssembledModel, assemble
from .models import ComparisonRow, FeatureCollection, GeoFeature, ModelSpec, RunConfig
from .panel import PanelBundle, load_bundle, load_distances, load_neighbors
from .simulate import simulate_dataset
from .structures import ProximityMatrix, adjacency_from_neighbor_list, distance_threshold_matrix

logger = logging.getLogger(__name__)

COMPARISON_FILE = "comparison.csv"
FORECASTS_FILE = "forecasts.csv"
SCORES_FILE = "scores.csv"
BASELINES_FILE = "baselines.csv"
FITS_DIR = "fits"
MAPS_DIR = "maps"


# --- Shared inputs ---


@dataclass
class Inputs:
    """Loaded panels plus lazily built proximity matrices."""

    config: RunConfig
    bundle: PanelBundle
    _proximity: dict[ProximityKind, ProximityMatrix]

    @classmethod
    def load(cls, config: RunConfig) -> Inputs:
        return cls(config, load_bundle(config.require_data(), config.training_window), {})

    def proximity(self, kind: Optional[ProximityKind]) -> Optional[ProximityMatrix]:
        if kind is None:
            return None
        if kind not in self._proximity:
            data = self.config.require_data()
            regions = self.bundle.regions
            if kind is ProximityKind.NEIGHBOR:
                if data.neighbors is None:
                    raise ConfigError("neighbor-based models need data.neighbors")
                self._proximity[kind] = adjacency_from_neighbor_list(load_neighbors(data.neighbors, regions), regions)
            else:
                if data.distances is None:
                    raise ConfigError("distance-based models need data.distances")
                self._proximity[kind] = distance_threshold_matrix(load_distances(data.distances, regions), regions)
        return self._proximity[kind]

    def assemble(self, spec: ModelSpec) -> AssembledModel:
        return assemble(spec, self.bundle, self.proximity(spec.proximity))


def _fit_dir(config: RunConfig, model_id: str) -> Path:
    return config.output_dir / FITS_DIR / model_id


# --- Verbs ---


def _fit_one(inputs: Inputs, spec: ModelSpec, config_hash: str) -> ComparisonRow:
    config = inputs.config
    inference = config.inference
    row = dict(
        model_id=spec.model_id,
        basis_kind=None if spec.null_model else spec.basis_kind,
        proximity=spec.proximity,
        structure=spec.structure,
        config_hash=config_hash,
    )
    try:
        model = inputs.assemble(spec)
        fit = fit_model(model, inference)
        diag = diagnostics(fit, model, inference.n_samples, inference.seed)
        write_fit_bundle(fit, model, _fit_dir(config, spec.model_id), diag, config_hash)
    except RiskcastError as e:
        logger.warning("Fit of %s failed: %s", spec.model_id, e)
        return ComparisonRow(status=FitStatus.FAILED, message=str(e), **row)
    status = FitStatus.OK if fit.iterations.outer_converged else FitStatus.NOT_CONVERGED
    return ComparisonRow(
        status=status,
        dic=diag.dic,
        pd=diag.pd,
        cv_log_score=diag.cv_log_score,
        flagged_cpo=len(diag.flagged),
        **row,
    )


def _mark_best(rows: list[ComparisonRow]) -> list[ComparisonRow]:
    """Flag the lowest DIC and CV log-score within each basis kind."""
    best: dict[tuple[object, str], str] = {}
    for metric in ("dic", "cv_log_score"):
        groups: dict[object, list[ComparisonRow]] = {}
        for r in rows:
            if getattr(r, metric) is not None:
                groups.setdefault(r.basis_kind, []).append(r)
        for basis, members in groups.items():
            best[(basis, metric)] = min(members, key=lambda r: (getattr(r, metric), r.model_id)).model_id
    return [
        r.model_copy(
            update={
                "best_dic": best.get((r.basis_kind, "dic")) == r.model_id,
                "best_cv": best.get((r.basis_kind, "cv_log_score")) == r.model_id,
            }
        )
        for r in rows
    ]


def cmd_fit_grid(config: RunConfig) -> ComparisonTable:
    """Fit every grid entry, persist the fits and write comparison.csv sorted by DIC."""
    inputs = Inputs.load(config)
    specs = config.grid.expand(inputs.bundle.covariate_names)
    config_hash = config.config_hash()
    logger.info("Fitting %d grid entries with %d workers", len(specs), config.inference.workers)
    # Build proximity matrices up front so workers only read shared state.
    for kind in {s.proximity for s in specs if s.proximity is not None}:
        try:
            inputs.proximity(kind)
        except RiskcastError as e:
            logger.warning("Proximity %s unavailable: %s", kind.value, e)
    with ThreadPoolExecutor(max_workers=config.inference.workers) as pool:
        rows = list(pool.map(lambda s: _fit_one(inputs, s, config_hash), specs))
    rows = sorted(rows, key=lambda r: (r.dic is None, r.dic if r.dic is not None else 0.0, r.model_id))
    table = ComparisonTable(_mark_best(rows))
    write_comparison(table, config.output_dir / COMPARISON_FILE)
    failed = [r.model_id for r in table if r.status is FitStatus.FAILED]
    if failed:
        logger.warning("%d of %d grid entries failed: %s", len(failed), len(table), ", ".join(failed))
    return table


def _resolve_model_id(config: RunConfig, model_id: Optional[str]) -> str:
    if model_id:
        return model_id
    path = config.output_dir / COMPARISON_FILE
    if not path.exists():
        raise ConfigError(f"no --model-id given and no {path} to pick the best fit from")
    best = read_comparison(path).best("dic")
    if best is None:
        raise ConfigError(f"{path} has no successful fit")
    logger.info("Using best-DIC model %s", best.model_id)
    return best.model_id


def _load_fitted(inputs: Inputs, model_id: str):
    directory = _fit_dir(inputs.config, model_id)
    manifest = read_fit_manifest(directory)
    model = inputs.assemble(manifest.spec)
    return model, load_fit_bundle(directory, model)


def _training_grid(values: np.ndarray, model: AssembledModel) -> np.ndarray:
    """Per-cell training values reshaped to (regions, usable months)."""
    return values.reshape(len(model.regions), -1)


def cmd_forecast(config: RunConfig, model_id: Optional[str] = None) -> ScoreReport:
    """Forecast the testing window with a persisted fit, then score it and both baselines."""
    inputs = Inputs.load(config)
    bundle = inputs.bundle
    inference = config.inference
    model_id = _resolve_model_id(config, model_id)
    model, fit = _load_fitted(inputs, model_id)
    config_hash = config.config_hash()
    level = 1.0 - inference.alpha
    test_months = config.test_months

    panel = predict(
        fit, model, bundle, test_months, inference.n_samples, inference.seed, level, inference.carry_forward_theta
    )
    write_forecasts(panel.rows(config_hash), config.output_dir / FORECASTS_FILE)

    fitted = fitted_relative_risk(fit, model, inference.n_samples, inference.seed, level)
    observed_train = bundle.risk.rr[fitted.region_idx, fitted.month_idx]
    report = score_report(
        bundle.regions,
        _training_grid(observed_train, model),
        _training_grid(fitted.rr_mean, model),
        _training_grid(fitted.rr_lo, model),
        _training_grid(fitted.rr_hi, model),
        ScoreSet.TRAIN,
        inference.alpha,
        config_hash,
    )
    test_idx = [bundle.cases.month_index(m) for m in test_months]
    observed_test = bundle.risk.rr[:, test_idx]
    report.extend(
        score_report(
            bundle.regions,
            observed_test,
            panel.rr_mean,
            panel.rr_lo,
            panel.rr_hi,
            ScoreSet.TEST,
            inference.alpha,
            config_hash,
        )
    )
    write_scores(report, config.output_dir / SCORES_FILE)

    training = bundle.risk.subset(bundle.months[bundle.cases.window_slice(*config.training_window)])
    try:
        naive = naive_monthly_mean(training, test_months, inference.baseline_lookback_years)
    except InsufficientHistoryError as e:
        logger.warning("Naive baseline unavailable: %s", e)
        naive = None
    try:
        null = null_model_forecast(bundle, test_months, inference)
    except RiskcastError as e:
        logger.warning("Null-model baseline unavailable: %s", e)
        null = None
    baselines = baseline_report(bundle.regions, observed_test, naive, null, inference.alpha, config_hash)
    write_baselines(baselines, config.output_dir / BASELINES_FILE)
    return report


def _map_period(config: RunConfig, period: str) -> tuple[YearMonth, ...]:
    if period == "test":
        return config.test_months
    try:
        year = int(period)
    except ValueError:
        raise ConfigError(f"--period must be 'test' or a training year, got {period!r}") from None
    return month_range(YearMonth(year, 1), YearMonth(year, 12))


def cmd_map(config: RunConfig, model_id: Optional[str] = None, period: str = "test") -> Path:
    """Write a GeoJSON FeatureCollection of predicted RR and APE per region and month.

    Each feature's properties hold `region` plus one `rr_mean_YYYY-MM` and one
    `ape_YYYY-MM` entry per mapped month; APE is null where the observed RR is 0.
    The file goes to `maps/<model_id>_<period>.geojson`.
    """
    data = config.require_data()
    if data.geometry is None:
        raise ConfigError("map needs data.geometry")
    inputs = Inputs.load(config)
    bundle = inputs.bundle
    inference = config.inference
    model_id = _resolve_model_id(config, model_id)
    model, fit = _load_fitted(inputs, model_id)
    months = _map_period(config, period)
    level = 1.0 - inference.alpha

    geometry = read_geojson(data.geometry)
    try:
        features = geometry.by_id(data.geometry_id_key)
    except ValueError as e:
        raise DataError(str(e), file=str(data.geometry)) from None
    missing = [r for r in bundle.regions if r not in features]
    if missing:
        raise GeometryMismatchError("regions absent from geometry", missing, file=str(data.geometry))

    if period == "test":
        rr_mean = predict(
            fit, model, bundle, months, inference.n_samples, inference.seed, level, inference.carry_forward_theta
        ).rr_mean
    else:
        fitted = fitted_relative_risk(fit, model, inference.n_samples, inference.seed, level)
        index = {(int(i), int(t)): k for k, (i, t) in enumerate(zip(fitted.region_idx, fitted.month_idx))}
        try:
            cols = [bundle.cases.month_index(m) for m in months]
            rr_mean = np.array([[fitted.rr_mean[index[(i, t)]] for t in cols] for i in range(len(bundle.regions))])
        except KeyError:
            raise DataError(f"year {period} is not fully inside the fitted months of {model_id}") from None

    observed = bundle.risk.rr[:, [bundle.cases.month_index(m) for m in months]]
    ape = absolute_percentage_error(observed, rr_mean)
    out = []
    for i, region in enumerate(bundle.regions):
        properties: dict = {data.geometry_id_key: region, "region": region}
        for t, month in enumerate(months):
            properties[f"rr_mean_{month}"] = float(rr_mean[i, t])
            properties[f"ape_{month}"] = None if ape.mask[i, t] else float(ape[i, t])
        out.append(GeoFeature(geometry=features[region].geometry, properties=properties))
    collection = FeatureCollection(
        features=out,
        properties={"model_id": model_id, "period": period, "config_hash": config.config_hash()},
    )
    return write_geojson(collection, config.output_dir / MAPS_DIR / f"{model_id}_{period}.geojson")


def cmd_simulate(config: RunConfig, seed: Optional[int] = None):
    """Write a synthetic dataset bundle to the output directory."""
    return simulate_dataset(config.simulation, config.output_dir, seed)


# --- Entry point ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyriskcast", description="Spatio-temporal relative-risk forecasting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="random seed (overrides inference.seed)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    verbs = parser.add_subparsers(dest="verb", required=True)
    verbs.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    verbs.add_parser("fit-grid", parents=[common], help="fit the model grid and write comparison.csv")
    forecast = verbs.add_parser("forecast", parents=[common], help="forecast and score the testing window")
    forecast.add_argument("--model-id", help="fitted model to use (default: best DIC)")
    maps = verbs.add_parser("map", parents=[common], help="write a GeoJSON risk map")
    maps.add_argument("--model-id", help="fitted model to use (default: best DIC)")
    maps.add_argument("--period", default="test", help="'test' or a training year")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then PYRISKCAST_* environment, then command-line overrides."""
    config = RunConfig.from_env(args.config)
    update: dict = {}
    if args.out is not None:
        update["output_dir"] = args.out
    if args.seed is not None:
        update["inference"] = config.inference.model_copy(update={"seed": args.seed})
        update["simulation"] = config.simulation.model_copy(update={"seed": args.seed})
    return config.model_copy(update=update) if update else config


_VERBS: dict[str, Callable[[RunConfig, argparse.Namespace], object]] = {
    "simulate": lambda config, args: cmd_simulate(config),
    "fit-grid": lambda config, args: cmd_fit_grid(config),
    "forecast": lambda config, args: cmd_forecast(config, args.model_id),
    "map": lambda config, args: cmd_map(config, args.model_id, args.period),
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_run_config(args)
        _VERBS[args.verb](config, args)
    except RiskcastError as e:
        logger.error("%s", e)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
