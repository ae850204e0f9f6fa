"""Writers and round-trip readers for every emitted artifact.

CSV tables are written by pandas with full float precision, so a reader
recovers exactly the values a writer was given. Fit bundles are a JSON
manifest plus the latent precision as Matrix Market triplets.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError
from scipy import io as spio
from scipy import sparse

from .dataframe import ComparisonTable, DataFrameList, ScoreReport
from .exceptions import DataError, SchemaError
from .infer import FitDiagnostics, FitIterations, PosteriorFit
from .model import AssembledModel
from .models import (
    BaselineRow,
    BlockSummary,
    ComparisonRow,
    FeatureCollection,
    FitManifest,
    ForecastRow,
    ScoreRow,
)

logger = logging.getLogger(__name__)

R = TypeVar("R", bound=BaseModel)

FIT_FILE = "fit.json"
PRECISION_FILE = "precision.mtx"


# --- CSV tables ---


def write_rows(rows: Sequence[BaseModel], path: str | os.PathLike[str], row_type: type[BaseModel]) -> Path:
    """Write rows with one column per model field, in declaration order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(row_type.model_fields)
    # Object dtype keeps optional integer columns from being written as floats.
    frame = pd.DataFrame([r.model_dump(mode="json") for r in rows], columns=columns, dtype=object)
    frame.to_csv(path, index=False, na_rep="", lineterminator="\n")
    logger.info("Wrote %d rows to %s", len(frame), path)
    return path


def read_rows(path: str | os.PathLike[str], row_type: type[R], container: type[list] = DataFrameList) -> list[R]:
    """Parse a table written by `write_rows`; empty cells fall back to field defaults."""
    path = Path(path)
    if not path.exists():
        raise SchemaError("file not found", file=str(path))
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c, f in row_type.model_fields.items() if f.is_required() and c not in frame.columns]
    if missing:
        raise SchemaError(f"missing columns {missing}", file=str(path), row=1, field=missing[0])
    out = container()
    for i, record in enumerate(frame.to_dict(orient="records")):
        try:
            out.append(row_type.model_validate({k: v for k, v in record.items() if v != ""}))
        except ValidationError as e:
            raise SchemaError(f"invalid {row_type.__name__}: {e.errors()[0]['msg']}", file=str(path), row=i + 2) from None
    return out


def write_comparison(table: Sequence[ComparisonRow], path: str | os.PathLike[str]) -> Path:
    return write_rows(table, path, ComparisonRow)


def read_comparison(path: str | os.PathLike[str]) -> ComparisonTable:
    return read_rows(path, ComparisonRow, ComparisonTable)  # type: ignore[return-value]


def write_forecasts(rows: Sequence[ForecastRow], path: str | os.PathLike[str]) -> Path:
    return write_rows(rows, path, ForecastRow)


def read_forecasts(path: str | os.PathLike[str]) -> DataFrameList[ForecastRow]:
    return read_rows(path, ForecastRow)  # type: ignore[return-value]


def write_scores(rows: Sequence[ScoreRow], path: str | os.PathLike[str]) -> Path:
    return write_rows(rows, path, ScoreRow)


def read_scores(path: str | os.PathLike[str]) -> ScoreReport:
    return read_rows(path, ScoreRow, ScoreReport)  # type: ignore[return-value]


def write_baselines(rows: Sequence[BaselineRow], path: str | os.PathLike[str]) -> Path:
    return write_rows(rows, path, BaselineRow)


def read_baselines(path: str | os.PathLike[str]) -> DataFrameList[BaselineRow]:
    return read_rows(path, BaselineRow)  # type: ignore[return-value]


# --- GeoJSON ---


def write_geojson(collection: FeatureCollection, path: str | os.PathLike[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = collection.model_dump(mode="json", exclude_none=False)
    path.write_text(json.dumps(payload, allow_nan=False, indent=1) + "\n", encoding="utf-8")
    logger.info("Wrote %d features to %s", len(collection.features), path)
    return path


def read_geojson(path: str | os.PathLike[str]) -> FeatureCollection:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SchemaError("file not found", file=str(path)) from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e}", file=str(path)) from None
    try:
        return FeatureCollection.model_validate(raw)
    except ValidationError as e:
        raise SchemaError(f"not a GeoJSON FeatureCollection: {e.errors()[0]['msg']}", file=str(path)) from None


# --- Fit bundles ---


def write_fit_bundle(
    fit: PosteriorFit,
    model: AssembledModel,
    directory: str | os.PathLike[str],
    diagnostics: FitDiagnostics | None = None,
    config_hash: str = "",
) -> Path:
    """Persist a fit as ``fit.json`` + ``precision.mtx`` under `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    it = fit.iterations
    manifest = FitManifest(
        model_id=fit.model_id,
        spec=model.spec,
        regions=model.regions,
        window=(str(model.window[0]), str(model.window[1])),
        column_names=model.column_names,
        layout=tuple(BlockSummary(name=b.name, start=b.start, size=b.size) for b in model.layout.blocks),
        constraint_shape=fit.constraints.shape,
        hyper_hat=fit.hyper_hat,
        latent_mode=[float(x) for x in fit.latent_mode],
        log_marginal=fit.log_marginal,
        converged=fit.converged,
        iterations={
            "newton": it.newton,
            "newton_total": it.newton_total,
            "objective_evaluations": it.objective_evaluations,
            "restarts": it.restarts,
            "outer_converged": it.outer_converged,
        },
        gradient_trace=[float(g) for g in fit.gradient_trace],
        dic=None if diagnostics is None else diagnostics.dic,
        pd=None if diagnostics is None else diagnostics.pd,
        cv_log_score=None if diagnostics is None else diagnostics.cv_log_score,
        flagged_cpo=None if diagnostics is None else len(diagnostics.flagged),
        config_hash=config_hash,
    )
    (directory / FIT_FILE).write_text(manifest.model_dump_json(indent=1) + "\n", encoding="utf-8")
    spio.mmwrite(str(directory / PRECISION_FILE), sparse.coo_matrix(fit.latent_precision), precision=17, symmetry="general")
    logger.info("Saved fit bundle for %s to %s", fit.model_id, directory)
    return directory


def read_fit_manifest(directory: str | os.PathLike[str]) -> FitManifest:
    path = Path(directory) / FIT_FILE
    if not path.exists():
        raise DataError("missing fit bundle", file=str(path))
    try:
        return FitManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise SchemaError(f"invalid fit manifest: {e.errors()[0]['msg']}", file=str(path)) from None


def load_fit_bundle(directory: str | os.PathLike[str], model: AssembledModel) -> PosteriorFit:
    """Restore a PosteriorFit for `model`, which must be the model the bundle was fitted on."""
    directory = Path(directory)
    manifest = read_fit_manifest(directory)
    if manifest.format_version != FitManifest.FORMAT_VERSION:
        raise SchemaError(f"unsupported fit bundle version {manifest.format_version}", file=str(directory))
    if manifest.column_names != model.column_names or manifest.regions != model.regions:
        raise DataError(f"fit bundle {manifest.model_id} does not match the assembled model", file=str(directory))
    layout = tuple((b.name, b.start, b.size) for b in manifest.layout)
    if layout != tuple((b.name, b.start, b.size) for b in model.layout.blocks):
        raise DataError(f"fit bundle {manifest.model_id} has a different latent layout", file=str(directory))
    precision_path = directory / PRECISION_FILE
    if not precision_path.exists():
        raise DataError("missing latent precision", file=str(precision_path))
    precision = sparse.csr_matrix(spio.mmread(str(precision_path)))
    latent = np.asarray(manifest.latent_mode, dtype=float)
    if precision.shape != (latent.size, latent.size):
        raise DataError(f"precision shape {precision.shape} does not match latent size {latent.size}", file=str(precision_path))
    it = manifest.iterations
    return PosteriorFit(
        model_id=manifest.model_id,
        latent_mode=latent,
        latent_precision=precision,
        constraints=model.layout.constraint_matrix,
        hyper_hat=manifest.hyper_hat,
        log_marginal=manifest.log_marginal,
        fitted_eta=model.linear_predictor(latent),
        converged=manifest.converged,
        iterations=FitIterations(
            newton=int(it.get("newton", 0)),
            newton_total=int(it.get("newton_total", 0)),
            objective_evaluations=int(it.get("objective_evaluations", 0)),
            restarts=int(it.get("restarts", 0)),
            outer_converged=bool(it.get("outer_converged", True)),
        ),
        gradient_trace=tuple(manifest.gradient_trace),
    )
