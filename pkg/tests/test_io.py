"""Tests for artifact writers and readers."""

import json
import math

import numpy as np
import pytest

from pyriskcast import (
    BaselineRow,
    BasisKind,
    ComparisonRow,
    ComparisonTable,
    DataError,
    FeatureCollection,
    FitStatus,
    ForecastRow,
    HyperParams,
    LagWindow,
    ModelSpec,
    ProximityKind,
    SchemaError,
    ScoreFlag,
    ScoreReport,
    ScoreRow,
    ScoreSet,
    SpatialStructure,
    assemble,
    diagnostics,
    fit_at,
    predict,
)
from pyriskcast.io import (
    load_fit_bundle,
    read_baselines,
    read_comparison,
    read_fit_manifest,
    read_forecasts,
    read_geojson,
    read_rows,
    read_scores,
    write_baselines,
    write_comparison,
    write_fit_bundle,
    write_forecasts,
    write_geojson,
    write_scores,
)
from pyriskcast.models import GeoFeature

ICAR_HYPER = HyperParams(log_kappa=math.log(20.0), log_sigma2_phi=math.log(0.1), log_tau_theta=math.log(5.0))


class TestTables:
    """Tests for CSV row tables."""

    def test_comparison_round_trip(self, tmp_path):
        """Optional fields, enums and free-text messages survive a write and read."""
        rows = [
            ComparisonRow(
                model_id="linear-neighbor-icar",
                basis_kind=BasisKind.LINEAR,
                proximity=ProximityKind.NEIGHBOR,
                structure=SpatialStructure.ICAR,
                status=FitStatus.OK,
                dic=1234.5678901234567,
                pd=0.1 + 0.2,
                cv_log_score=3.25,
                flagged_cpo=2,
                best_dic=True,
                config_hash="abcd",
            ),
            ComparisonRow(
                model_id="linear-distance-icar",
                status=FitStatus.FAILED,
                message="region R1 is isolated, cannot build ICAR",
                config_hash="abcd",
            ),
        ]
        path = write_comparison(rows, tmp_path / "comparison.csv")
        back = read_comparison(path)
        assert isinstance(back, ComparisonTable)
        assert list(back) == rows
        assert back[1].dic is None and back[1].flagged_cpo is None

    def test_column_order(self, tmp_path):
        """Columns follow field declaration order."""
        path = write_comparison([ComparisonRow(model_id="null", status=FitStatus.OK)], tmp_path / "c.csv")
        header = path.read_text().splitlines()[0]
        assert header.split(",")[:5] == ["model_id", "basis_kind", "proximity", "structure", "status"]

    def test_forecasts_round_trip(self, tmp_path):
        rows = [
            ForecastRow(
                region="A", year=2005, month=m, horizon=m - 9, rr_mean=1 / 3, rr_lo=0.1, rr_hi=2.0,
                cases_mean=20.5, cases_lo=11.0, cases_hi=33.0,
            )
            for m in (10, 11, 12)
        ]
        back = read_forecasts(write_forecasts(rows, tmp_path / "forecasts.csv"))
        assert list(back) == rows

    def test_scores_round_trip(self, tmp_path):
        """Flagged rows come back flagged and without numbers."""
        rows = [
            ScoreRow(region="A", set=ScoreSet.TEST, nrmse=0.5, nis=1.25),
            ScoreRow(region="B", set=ScoreSet.TEST, flag=ScoreFlag.UNDEFINED_RR_ZERO),
        ]
        path = write_scores(rows, tmp_path / "scores.csv")
        assert "undefined_rr_zero" in path.read_text()
        back = read_scores(path)
        assert isinstance(back, ScoreReport)
        assert back.flagged() == ["B"]
        assert back[1].nrmse is None

    def test_baselines_round_trip(self, tmp_path):
        """Unavailable baselines stay None."""
        rows = [
            BaselineRow(region="A", naive_nrmse=0.3, null_nrmse=0.45, null_nis=2.5),
            BaselineRow(region="B", naive_nrmse=None, null_nrmse=0.5, null_nis=1.75),
            BaselineRow(region="C", flag=ScoreFlag.UNDEFINED_RR_ZERO),
        ]
        back = read_baselines(write_baselines(rows, tmp_path / "baselines.csv"))
        assert list(back) == rows
        assert back[1].naive_nrmse is None

    def test_missing_file(self, tmp_path):
        with pytest.raises(SchemaError, match="file not found"):
            read_rows(tmp_path / "nope.csv", ScoreRow)

    def test_missing_columns(self, write_csv):
        path = write_csv("scores.csv", [{"region": "A"}])
        with pytest.raises(SchemaError, match="missing columns") as err:
            read_rows(path, ScoreRow)
        assert err.value.field == "set"

    def test_invalid_row(self, write_csv):
        """A bad enum value is reported with its line number."""
        path = write_csv("scores.csv", [{"region": "A", "set": "test"}, {"region": "B", "set": "holdout"}])
        with pytest.raises(SchemaError) as err:
            read_rows(path, ScoreRow)
        assert err.value.row == 3


class TestGeoJson:
    """Tests for GeoJSON output."""

    def test_round_trip(self, tmp_path):
        collection = FeatureCollection(
            features=[
                GeoFeature(
                    geometry={"type": "Point", "coordinates": [1.0, 2.0]},
                    properties={"region": "A", "rr_mean_2005-10": 1.5},
                )
            ]
        )
        back = read_geojson(write_geojson(collection, tmp_path / "m.geojson"))
        assert back == collection
        assert back.by_id()["A"].properties["rr_mean_2005-10"] == 1.5

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.geojson"
        path.write_text("{not json")
        with pytest.raises(SchemaError, match="invalid JSON"):
            read_geojson(path)

    def test_not_a_collection(self, tmp_path):
        path = tmp_path / "feature.geojson"
        path.write_text(json.dumps({"type": "Feature", "properties": {}}))
        with pytest.raises(SchemaError, match="FeatureCollection"):
            read_geojson(path)


class TestFitBundle:
    """Tests for persisted fits."""

    @pytest.fixture
    def saved(self, tmp_path, icar_model):
        fit = fit_at(icar_model, ICAR_HYPER)
        diag = diagnostics(fit, icar_model, n_samples=300, seed=0)
        directory = write_fit_bundle(fit, icar_model, tmp_path / "fits" / fit.model_id, diag, config_hash="h1")
        return fit, diag, directory

    def test_files(self, saved):
        _, _, directory = saved
        assert (directory / "fit.json").is_file()
        assert (directory / "precision.mtx").is_file()

    def test_manifest(self, saved, icar_model):
        fit, diag, directory = saved
        manifest = read_fit_manifest(directory)
        assert manifest.model_id == "linear-neighbor-icar-lag3_5"
        assert manifest.spec == icar_model.spec
        assert manifest.dic == diag.dic
        assert manifest.flagged_cpo == len(diag.flagged)
        assert manifest.config_hash == "h1"
        assert manifest.constraint_shape == (9, 58)
        assert manifest.window == ("2000-01", "2005-09")

    def test_round_trip(self, saved, icar_model):
        """The restored fit matches the original and forecasts identically."""
        fit, _, directory = saved
        loaded = load_fit_bundle(directory, icar_model)
        np.testing.assert_array_equal(loaded.latent_mode, fit.latent_mode)
        np.testing.assert_allclose(loaded.latent_precision.toarray(), fit.latent_precision.toarray(), rtol=1e-15)
        assert loaded.hyper_hat == fit.hyper_hat
        assert loaded.log_marginal == fit.log_marginal
        assert loaded.iterations == fit.iterations

    def test_restored_fit_forecasts(self, saved, icar_model, bundle, test_months):
        fit, _, directory = saved
        loaded = load_fit_bundle(directory, icar_model)
        a = predict(fit, icar_model, bundle, test_months, n_samples=200, seed=3)
        b = predict(loaded, icar_model, bundle, test_months, n_samples=200, seed=3)
        np.testing.assert_allclose(a.rr_mean, b.rr_mean, rtol=1e-10)

    def test_missing_bundle(self, tmp_path, icar_model):
        with pytest.raises(DataError, match="missing fit bundle"):
            load_fit_bundle(tmp_path / "fits" / "nothing", icar_model)

    def test_wrong_model(self, saved, null_model):
        _, _, directory = saved
        with pytest.raises(DataError, match="does not match"):
            load_fit_bundle(directory, null_model)

    def test_different_layout(self, saved, bundle, path_graph):
        """Same fixed effects but an extra random-effect block is rejected."""
        _, _, directory = saved
        spec = ModelSpec(
            covariate_names=("temp",),
            lag_window=LagWindow(lag_min=3, lag_max=5),
            proximity=ProximityKind.NEIGHBOR,
            structure=SpatialStructure.BYM,
        )
        with pytest.raises(DataError, match="different latent layout"):
            load_fit_bundle(directory, assemble(spec, bundle, path_graph))
