import numpy as np
import pandas as pd
import pytest

from pyriskcast import (
    CasePanel,
    CovariatePanel,
    InferenceConfig,
    LagWindow,
    ModelSpec,
    PanelBundle,
    PopulationPanel,
    ProximityKind,
    SpatialStructure,
    adjacency_from_neighbor_list,
    assemble,
)
from pyriskcast._utils import YearMonth, month_range

REGIONS = ("A", "B", "C")
START = YearMonth(2000, 1)
END = YearMonth(2005, 12)
TRAIN = (YearMonth(2000, 1), YearMonth(2005, 9))
TEST_MONTHS = month_range(YearMonth(2005, 10), YearMonth(2005, 12))


@pytest.fixture
def months():
    return month_range(START, END)


@pytest.fixture
def temp_panel(months):
    """Seasonal covariate with a per-region phase and some noise."""
    rng = np.random.default_rng(5)
    calendar = np.array([m.month for m in months], dtype=float)
    phase = np.array([0.0, 0.7, 1.4])
    values = np.sin(2 * np.pi * calendar[None, :] / 12 + phase[:, None]) + 0.3 * rng.standard_normal(
        (len(REGIONS), len(months))
    )
    return CovariatePanel(regions=REGIONS, months=months, values=values, name="temp")


@pytest.fixture
def population_panel():
    years = tuple(range(2000, 2006))
    base = np.array([20000.0, 24000.0, 28000.0])
    population = np.round(base[:, None] * 1.01 ** np.arange(len(years))[None, :])
    return PopulationPanel(regions=REGIONS, years=years, population=population)


@pytest.fixture
def case_panel(months, population_panel, temp_panel):
    """Counts around 20-30 per cell, driven by season and the covariate at lag 3."""
    rng = np.random.default_rng(7)
    calendar = np.array([m.month for m in months], dtype=float)
    pop = population_panel.for_months(months)
    lagged = np.roll(temp_panel.values, 3, axis=1)
    mu = pop * 1e-3 * np.exp(0.25 * np.cos(2 * np.pi * calendar / 12)[None, :] + 0.1 * lagged)
    return CasePanel(regions=REGIONS, months=months, counts=rng.poisson(mu))


@pytest.fixture
def bundle(case_panel, population_panel, temp_panel):
    return PanelBundle.build(case_panel, population_panel, [temp_panel], TRAIN)


@pytest.fixture
def path_graph():
    """A - B - C."""
    return adjacency_from_neighbor_list([("A", "B"), ("B", "C")], REGIONS)


@pytest.fixture
def icar_spec():
    return ModelSpec(
        covariate_names=("temp",),
        lag_window=LagWindow(lag_min=3, lag_max=5),
        proximity=ProximityKind.NEIGHBOR,
        structure=SpatialStructure.ICAR,
    )


@pytest.fixture
def icar_model(icar_spec, bundle, path_graph):
    return assemble(icar_spec, bundle, path_graph)


@pytest.fixture
def null_model(bundle):
    return assemble(ModelSpec.null(), bundle)


@pytest.fixture
def fast_inference():
    """Small restart and sample budgets so unit tests stay quick."""
    return InferenceConfig(n_restarts=1, simplex_max_iter=60, n_samples=400, seed=3)


@pytest.fixture
def write_csv(tmp_path):
    """Factory writing a list of row dicts (or a DataFrame) to a CSV under tmp_path."""

    def _write(name, rows, columns=None):
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows, columns=columns)
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return path

    return _write


@pytest.fixture
def regions():
    return REGIONS


@pytest.fixture
def test_months():
    return TEST_MONTHS
