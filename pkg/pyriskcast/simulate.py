"""Synthetic datasets drawn from the forecasting model itself, with known truth.

Regions sit on a square lattice: rook neighbors share an edge, distances are
between cell centers, and each region's geometry is its unit cell.

Usage:
    truth = simulate_dataset(SimulationConfig(n_regions=8, seed=3), "data/sim")
    config = RunConfig.from_file("data/sim/run.json")
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from ._utils import YearMonth
from .enums import SpatialStructure
from .io import write_geojson
from .lagbasis import cross_basis, default_lag_spec
from .models import (
    DataPaths,
    FeatureCollection,
    GeoFeature,
    GridConfig,
    InferenceConfig,
    RunConfig,
    SimulationConfig,
    SimulationTruth,
)
from .panel import CovariatePanel
from .structures import (
    SpatialSpec,
    adjacency_from_neighbor_list,
    cyclic_rw1_precision,
    sample_prior,
)

logger = logging.getLogger(__name__)

CASES_FILE = "cases.csv"
POPULATION_FILE = "population.csv"
NEIGHBORS_FILE = "neighbors.csv"
DISTANCES_FILE = "distances.csv"
GEOMETRY_FILE = "geometry.geojson"
TRUTH_FILE = "truth.json"
RUN_FILE = "run.json"

# Yearly population growth factor.
POPULATION_GROWTH = 1.01


@dataclass(frozen=True)
class Lattice:
    regions: tuple[str, ...]
    coords: np.ndarray
    pairs: tuple[tuple[str, str], ...]

    @classmethod
    def square(cls, n: int) -> Lattice:
        """`n` cells filled row by row on a ceil(sqrt(n))-wide grid; always connected."""
        width = math.ceil(math.sqrt(n))
        digits = len(str(n))
        regions = tuple(f"R{i + 1:0{digits}d}" for i in range(n))
        coords = np.array([(i % width, i // width) for i in range(n)], dtype=float)
        pairs = tuple(
            (regions[i], regions[j])
            for i in range(n)
            for j in range(i + 1, n)
            if np.abs(coords[i] - coords[j]).sum() == 1
        )
        return cls(regions, coords, pairs)

    def distances(self, cell_km: float) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return cell_km * np.sqrt((diff**2).sum(axis=-1))

    def geometry(self) -> FeatureCollection:
        features = []
        for region, (x, y) in zip(self.regions, self.coords):
            ring = [[x, y], [x + 1, y], [x + 1, y + 1], [x, y + 1], [x, y]]
            features.append(
                GeoFeature(
                    geometry={"type": "Polygon", "coordinates": [[[float(a), float(b)] for a, b in ring]]},
                    properties={"region": region},
                )
            )
        return FeatureCollection(features=features)


def _seasonal_ar(rng: np.random.Generator, n_regions: int, months: tuple[YearMonth, ...], ar: float) -> np.ndarray:
    """Annual cycle with a random phase per region plus stationary AR(1) noise."""
    phase = rng.uniform(0.0, 2.0 * math.pi, size=n_regions)
    calendar = np.array([m.month for m in months], dtype=float)
    seasonal = np.sin(2.0 * math.pi * calendar[None, :] / 12.0 + phase[:, None])
    noise = np.empty((n_regions, len(months)))
    noise[:, 0] = rng.standard_normal(n_regions)
    innovation = math.sqrt(1.0 - ar**2)
    for t in range(1, len(months)):
        noise[:, t] = ar * noise[:, t - 1] + innovation * rng.standard_normal(n_regions)
    return seasonal + noise


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")


def simulate_dataset(
    sim: SimulationConfig,
    out_dir: str | os.PathLike[str],
    seed: int | None = None,
) -> SimulationTruth:
    """Draw one dataset and write it, with truth.json and a ready-to-run run.json, to `out_dir`."""
    seed = sim.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lattice = Lattice.square(sim.n_regions)
    regions = lattice.regions
    months = sim.months
    n_regions, n_months = len(regions), len(months)
    years = tuple(range(sim.start_year, sim.start_year + sim.n_years))
    year_idx = np.array([m.year - sim.start_year for m in months])

    lo, hi = sim.population_range
    base = rng.uniform(lo, hi, size=n_regions)
    population = np.round(base[:, None] * POPULATION_GROWTH ** np.arange(sim.n_years)[None, :])
    eta = np.log(population[:, year_idx] * sim.base_rate) + sim.alpha

    standardization: dict[str, tuple[float, float]] = {}
    covariate_values: dict[str, np.ndarray] = {}
    lag_spec = default_lag_spec(sim.lag_window)
    for name in (*sim.covariates, *sim.noise_covariates):
        values = _seasonal_ar(rng, n_regions, months, sim.covariate_ar)
        covariate_values[name] = values
        center, scale = float(values.mean()), float(values.std())
        standardization[name] = (center, scale)
        if name not in sim.covariates:
            continue
        panel = CovariatePanel(regions=regions, months=months, values=(values - center) / scale, name=name)
        block = cross_basis(panel, sim.lag_window, "linear", lag_spec).block()
        effect = np.nan_to_num(block @ np.asarray(sim.covariates[name], dtype=float), nan=0.0)
        eta = eta + effect

    phi = None
    if sim.include_monthly_effect:
        phi = sample_prior(cyclic_rw1_precision(12), 1.0 / sim.sigma2_phi, rng, n_regions)
        calendar = np.array([m.month - 1 for m in months])
        eta = eta + phi[:, calendar]

    proximity = adjacency_from_neighbor_list(lattice.pairs, regions)
    blocks = SpatialSpec(sim.structure, proximity, sim.d).blocks(n_regions)
    theta = sample_prior(blocks[0], sim.tau_theta, rng, sim.n_years)
    eta = eta + theta[year_idx].T
    v = None
    if sim.structure is SpatialStructure.BYM:
        v = sample_prior(blocks[1], sim.tau_v, rng, 1)[0]
        eta = eta + v[:, None]

    mu = np.exp(eta)
    counts = rng.negative_binomial(sim.kappa, sim.kappa / (sim.kappa + mu)).astype(np.int64)

    empirical_rate = float(counts.sum() / population[:, year_idx].sum())
    truth = SimulationTruth(
        seed=seed,
        regions=regions,
        months=(str(months[0]), str(months[-1])),
        alpha=sim.alpha,
        alpha_effective=sim.alpha + math.log(sim.base_rate / empirical_rate),
        empirical_rate=empirical_rate,
        kappa=sim.kappa,
        covariates=dict(sim.covariates),
        noise_covariates=sim.noise_covariates,
        standardization=standardization,
        structure=sim.structure,
        tau_theta=sim.tau_theta,
        tau_v=sim.tau_v if sim.structure is SpatialStructure.BYM else None,
        d=sim.d if sim.structure is SpatialStructure.PROPER_CAR else None,
        sigma2_phi=sim.sigma2_phi if sim.include_monthly_effect else None,
        lag_window=sim.lag_window,
        phi=None if phi is None else phi.tolist(),
        theta=theta.tolist(),
        v=None if v is None else v.tolist(),
    )

    region_col = np.repeat(np.array(regions, dtype=object), n_months)
    year_col = np.tile([m.year for m in months], n_regions)
    month_col = np.tile([m.month for m in months], n_regions)
    _write_csv(
        pd.DataFrame({"region": region_col, "year": year_col, "month": month_col, "cases": counts.ravel()}),
        out / CASES_FILE,
    )
    _write_csv(
        pd.DataFrame(
            {
                "region": np.repeat(np.array(regions, dtype=object), sim.n_years),
                "year": np.tile(years, n_regions),
                "population": population.astype(np.int64).ravel(),
            }
        ),
        out / POPULATION_FILE,
    )
    covariate_files = []
    for name, values in covariate_values.items():
        path = out / "covariates" / f"{name}.csv"
        path.parent.mkdir(exist_ok=True)
        _write_csv(
            pd.DataFrame({"region": region_col, "year": year_col, "month": month_col, "value": values.ravel()}),
            path,
        )
        covariate_files.append(Path("covariates") / f"{name}.csv")
    _write_csv(pd.DataFrame(list(lattice.pairs), columns=["region_a", "region_b"]), out / NEIGHBORS_FILE)
    dist = lattice.distances(sim.cell_km)
    iu = np.triu_indices(n_regions, k=1)
    _write_csv(
        pd.DataFrame(
            {
                "region_a": np.array(regions, dtype=object)[iu[0]],
                "region_b": np.array(regions, dtype=object)[iu[1]],
                "km": dist[iu],
            }
        ),
        out / DISTANCES_FILE,
    )
    write_geojson(lattice.geometry(), out / GEOMETRY_FILE)
    (out / TRUTH_FILE).write_text(truth.model_dump_json(indent=1) + "\n", encoding="utf-8")
    _write_run_config(sim, out, covariate_files, seed)
    logger.info(
        "Simulated %d regions x %d months (%d cases) into %s", n_regions, n_months, int(counts.sum()), out
    )
    return truth


def _write_run_config(sim: SimulationConfig, out: Path, covariate_files: list[Path], seed: int) -> None:
    """A run.json that fits the last simulated year back, training on everything before it."""
    last = sim.months[-1]
    train_end = last.shift(-sim.lag_window.lag_min)
    config = RunConfig(
        data=DataPaths(
            cases=Path(CASES_FILE),
            population=Path(POPULATION_FILE),
            covariates=tuple(covariate_files),
            neighbors=Path(NEIGHBORS_FILE),
            distances=Path(DISTANCES_FILE),
            geometry=Path(GEOMETRY_FILE),
        ),
        train_start=str(sim.months[0]),
        train_end=str(train_end),
        test_start=str(train_end.shift(1)),
        test_end=str(last),
        grid=GridConfig(lag_window=sim.lag_window),
        inference=InferenceConfig(seed=seed),
        simulation=sim.model_copy(update={"seed": seed}),
    )
    (out / RUN_FILE).write_text(json.dumps(config.model_dump(mode="json"), indent=1) + "\n", encoding="utf-8")


def read_truth(path: str | os.PathLike[str]) -> SimulationTruth:
    path = Path(path)
    if path.is_dir():
        path = path / TRUTH_FILE
    return SimulationTruth.model_validate_json(path.read_text(encoding="utf-8"))
