"""Distributed-lag cross-basis construction.

A covariate's effect is a surface over exposure value and lag. The exposure
dimension is either the identity (linear) or a natural cubic spline; the lag
dimension is always a natural cubic spline over the integer lags of a window.

Cross-basis column ``j*K + k`` at cell (i, t) is
``sum_l B_exp_j(x[i, t-l]) * B_lag_k(l)`` over the lag window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import DataError, InsufficientHistoryError
from .models import LagWindow, SplineSpec
from .panel import CovariatePanel

logger = logging.getLogger(__name__)

Exposure = Union[Literal["linear"], SplineSpec]


def _natural_cubic_basis(x: np.ndarray, spec: SplineSpec) -> np.ndarray:
    lo, hi = spec.boundary_knots
    knots = np.concatenate([[lo] * 4, spec.interior_knots, [hi] * 4])
    n_basis = len(knots) - 4
    spline = BSpline(knots, np.eye(n_basis), 3, extrapolate=True)

    basis = np.empty((x.size, n_basis))
    inside = (x >= lo) & (x <= hi)
    if inside.any():
        basis[inside] = spline(x[inside])
    # Linear continuation beyond the boundary knots, where a natural spline has zero curvature.
    slope = spline.derivative(1)
    for bound, mask in ((lo, x < lo), (hi, x > hi)):
        if mask.any():
            at = np.array([bound])
            basis[mask] = spline(at) + (x[mask] - bound)[:, None] * slope(at)

    # Drop the first B-spline (no intercept) and project onto zero second derivative at both ends.
    constraints = spline.derivative(2)(np.array([lo, hi]))[:, 1:]
    q, _ = np.linalg.qr(constraints.T, mode="complete")
    return basis[:, 1:] @ q[:, 2:]


def natural_cubic_basis(x: np.ndarray, spec: SplineSpec) -> np.ndarray:
    """Natural cubic spline basis without intercept, shape (len(x), len(interior_knots) + 1)."""
    values = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(values)):
        raise DataError("spline basis requested at non-finite values")
    if np.unique(values).size < 2:
        raise DataError("spline basis needs at least 2 distinct values")
    return _natural_cubic_basis(values, spec)


def default_lag_spec(window: LagWindow) -> SplineSpec:
    """Two interior knots equally spaced on the log(lag + 1) scale."""
    if window.n_lags < 3:
        raise DataError(f"a lag spline needs at least 3 distinct lags, window has {window.n_lags}")
    lo, hi = window.lag_min, window.lag_max
    log_knots = np.linspace(np.log(lo + 1), np.log(hi + 1), 4)[1:3]
    return SplineSpec(
        interior_knots=tuple(float(k) for k in np.exp(log_knots) - 1),
        boundary_knots=(float(lo), float(hi)),
    )


def exposure_basis(x: np.ndarray, exposure: Exposure) -> np.ndarray:
    """Exposure basis with a trailing column axis: (..., J)."""
    values = np.asarray(x, dtype=float)
    if not isinstance(exposure, SplineSpec):
        return values[..., None]
    flat = _natural_cubic_basis(values.ravel(), exposure)
    return flat.reshape(values.shape + (flat.shape[1],))


def exposure_df(exposure: Exposure) -> int:
    return exposure.df if isinstance(exposure, SplineSpec) else 1


def lag_basis_matrix(window: LagWindow, lag: SplineSpec | None = None) -> np.ndarray:
    """Lag basis evaluated at every lag of the window, shape (n_lags, K)."""
    spec = lag or default_lag_spec(window)
    return _natural_cubic_basis(window.lags.astype(float), spec)


@dataclass(frozen=True, eq=False)
class CrossBasis:
    """Cross-basis rows for every (region, month) cell, region-major.

    Rows for months before `valid_from` are NaN and flagged unusable.
    """

    columns: np.ndarray
    column_meta: tuple[tuple[str, int, int], ...]
    valid_from: int
    n_regions: int
    n_months: int

    @property
    def usable(self) -> np.ndarray:
        months = np.tile(np.arange(self.n_months), self.n_regions)
        return months >= self.valid_from

    @property
    def n_columns(self) -> int:
        return self.columns.shape[1]

    def block(self) -> np.ndarray:
        """Columns reshaped to (regions, months, columns)."""
        return self.columns.reshape(self.n_regions, self.n_months, -1)


def cross_basis(
    cov: CovariatePanel,
    window: LagWindow,
    exposure: Exposure = "linear",
    lag: SplineSpec | None = None,
) -> CrossBasis:
    values = cov.values
    n_regions, n_months = values.shape
    valid_from = window.lag_max
    if valid_from >= n_months:
        raise InsufficientHistoryError(
            f"covariate {cov.name!r} has {n_months} months, lag_max {window.lag_max} leaves no usable row"
        )
    bexp = exposure_basis(values, exposure)
    blag = lag_basis_matrix(window, lag)
    n_exp, n_lag = bexp.shape[-1], blag.shape[1]

    acc = np.zeros((n_regions, n_months - valid_from, n_exp, n_lag))
    for idx, l in enumerate(window.lags):
        shifted = bexp[:, valid_from - l : n_months - l, :]
        acc += shifted[..., None] * blag[idx]
    out = np.full((n_regions, n_months, n_exp, n_lag), np.nan)
    out[:, valid_from:] = acc

    meta = tuple((cov.name, j, k) for j in range(n_exp) for k in range(n_lag))
    logger.debug("Cross-basis %s: %d columns, usable from month %d", cov.name, len(meta), valid_from)
    return CrossBasis(
        columns=out.reshape(n_regions * n_months, n_exp * n_lag),
        column_meta=meta,
        valid_from=valid_from,
        n_regions=n_regions,
        n_months=n_months,
    )


def exposure_lag_surface(
    coefficients: np.ndarray,
    exposure: Exposure,
    window: LagWindow,
    x_grid: np.ndarray,
    lag: SplineSpec | None = None,
) -> np.ndarray:
    """Log-RR contribution at each (exposure value, lag), shape (len(x_grid), n_lags)."""
    beta = np.asarray(coefficients, dtype=float).ravel()
    blag = lag_basis_matrix(window, lag)
    n_exp = exposure_df(exposure)
    if beta.size != n_exp * blag.shape[1]:
        raise ValueError(f"expected {n_exp * blag.shape[1]} coefficients, got {beta.size}")
    bexp = exposure_basis(np.asarray(x_grid, dtype=float).ravel(), exposure)
    return bexp @ beta.reshape(n_exp, blag.shape[1]) @ blag.T


def cumulative_exposure_response(
    coefficients: np.ndarray,
    exposure: Exposure,
    window: LagWindow,
    x_grid: np.ndarray,
    lag: SplineSpec | None = None,
) -> np.ndarray:
    """Total log-RR effect of sustained exposure x across the lag window."""
    return exposure_lag_surface(coefficients, exposure, window, x_grid, lag).sum(axis=1)
