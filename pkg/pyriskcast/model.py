"""Assemble one model variant into a latent Gaussian problem with a count likelihood.

The latent vector is laid out block by block::

    [fixed: intercept + cross-basis coefficients]
    [phi:   12 cyclic monthly effects per region]
    [theta: one spatial field per year]
    [v:     unstructured per-region effects, BYM only]

and the linear predictor is ``eta = offset + A @ latent`` with a sparse ``A``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np
from pydantic import ValidationError
from scipy import sparse
from scipy.special import betaln, gammaln

from ._utils import YearMonth
from .enums import BasisKind, HyperRole, SpatialStructure
from .exceptions import ConfigError, DataError, InsufficientHistoryError, NumericalError
from .lagbasis import Exposure, cross_basis, default_lag_spec, exposure_df
from .models import AUTOREGRESSIVE_TERM, HyperParams, InferenceConfig, LagWindow, ModelSpec, SplineSpec
from .panel import CovariatePanel, PanelBundle
from .structures import (
    PrecisionStructure,
    ProximityMatrix,
    SpatialSpec,
    cyclic_rw1_precision,
    replicate,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


# --- Likelihoods ---


def nb_log_pmf(y, mu, kappa) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Negative-binomial log pmf with mean mu and size kappa (Var = mu + mu^2/kappa).

    Returns the log pmf and its first and second derivatives with respect to
    eta = log(mu).
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(kappa))):
        raise NumericalError("negative-binomial log pmf received non-finite input")
    if np.any(mu <= 0) or np.any(kappa <= 0):
        raise ValueError("mu and kappa must be positive")

    # lgamma(y+k) - lgamma(k) - lgamma(y+1) via betaln stays accurate for huge kappa.
    y_pos = np.maximum(y, 1.0)
    comb = np.where(y > 0, -betaln(kappa, y_pos) - np.log(y_pos), 0.0)
    log1p_ratio = np.log1p(mu / kappa)
    logpmf = comb - kappa * log1p_ratio + y * (np.log(mu) - np.log(kappa) - log1p_ratio)

    denom = kappa + mu
    d1 = kappa * (y - mu) / denom
    d2 = -kappa * mu * (kappa + y) / denom**2
    return logpmf, d1, d2


class Likelihood(Protocol):
    """Observation model over the linear predictor."""

    roles: tuple[HyperRole, ...]

    def derivatives(
        self, y: np.ndarray, eta: np.ndarray, hyper: HyperParams
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def sample(self, eta: np.ndarray, hyper: HyperParams, rng: np.random.Generator) -> np.ndarray: ...


class NegativeBinomialLikelihood:
    roles: tuple[HyperRole, ...] = (HyperRole.KAPPA,)

    def derivatives(self, y, eta, hyper):
        return nb_log_pmf(y, np.exp(eta), hyper.kappa)

    def sample(self, eta, hyper, rng):
        mu = np.exp(eta)
        kappa = hyper.kappa
        return rng.negative_binomial(kappa, kappa / (kappa + mu)).astype(float)

    def __repr__(self) -> str:
        return "NegativeBinomialLikelihood()"


class GaussianLikelihood:
    """Gaussian observations with known variance, for conjugate checks."""

    roles: tuple[HyperRole, ...] = ()

    def __init__(self, variance: float = 1.0):
        if not variance > 0:
            raise ValueError(f"variance must be positive, got {variance}")
        self.variance = float(variance)

    def derivatives(self, y, eta, hyper):
        resid = np.asarray(y, dtype=float) - eta
        ll = -0.5 * (LOG_2PI + math.log(self.variance)) - 0.5 * resid**2 / self.variance
        return ll, resid / self.variance, np.full_like(resid, -1.0 / self.variance)

    def sample(self, eta, hyper, rng):
        return rng.normal(eta, math.sqrt(self.variance))

    def __repr__(self) -> str:
        return f"GaussianLikelihood(variance={self.variance})"


# --- Layout ---


@dataclass(frozen=True, eq=False)
class LatentBlock:
    """A contiguous range of the latent vector and its prior.

    `structure` is the per-replicate precision; None means the vague
    independent Gaussian prior of the fixed effects.
    """

    name: str
    start: int
    size: int
    structure: PrecisionStructure | None = None
    replicates: int = 1

    def __post_init__(self) -> None:
        if self.structure is not None and self.structure.size * self.replicates != self.size:
            raise ConfigError(
                f"block {self.name}: {self.replicates} x {self.structure.size} does not match size {self.size}"
            )

    @property
    def stop(self) -> int:
        return self.start + self.size

    @property
    def index(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def role(self) -> HyperRole | None:
        return None if self.structure is None else self.structure.multiplier_role

    @property
    def inflated(self) -> bool:
        """Whether the structure carries a proper CAR diagonal inflation d."""
        return self.structure is not None and self.structure.offset > 0

    @cached_property
    def replicated(self) -> PrecisionStructure | None:
        return None if self.structure is None else replicate(self.structure, self.replicates)

    @property
    def constraints(self) -> np.ndarray:
        if self.replicated is None:
            return np.zeros((0, self.size))
        return self.replicated.constraints

    @property
    def rank(self) -> int:
        return self.size if self.replicated is None else self.replicated.rank

    def unit_precision(self, hyper: HyperParams) -> sparse.csr_matrix:
        """Structure matrix with d taken from `hyper` when inflated."""
        assert self.replicated is not None
        q = self.replicated.q
        if self.inflated and hyper.has(HyperRole.D):
            q = q + (hyper.d - self.replicated.offset) * sparse.identity(self.size, format="csr")
        return q

    def precision(self, hyper: HyperParams, fixed_variance: float) -> sparse.csr_matrix:
        if self.replicated is None:
            return sparse.identity(self.size, format="csr") / fixed_variance
        return hyper.multiplier(self.role) * self.unit_precision(hyper)

    def log_normalizer(self, hyper: HyperParams, fixed_variance: float) -> float:
        """Constant terms of the block's Gaussian log prior, excluding log(multiplier)."""
        if self.structure is None:
            return -0.5 * self.size * (LOG_2PI + math.log(fixed_variance))
        offset = hyper.d if (self.inflated and hyper.has(HyperRole.D)) else None
        return -0.5 * self.rank * LOG_2PI + 0.5 * self.replicates * self.structure.log_pdet(offset)


@dataclass(frozen=True, eq=False)
class LatentLayout:
    blocks: tuple[LatentBlock, ...]

    def __post_init__(self) -> None:
        position = 0
        for block in self.blocks:
            if block.start != position:
                raise ConfigError(f"block {block.name} starts at {block.start}, expected {position}")
            position = block.stop

    @property
    def total(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    def get(self, name: str) -> LatentBlock | None:
        for block in self.blocks:
            if block.name == name:
                return block
        return None

    def block(self, name: str) -> LatentBlock:
        found = self.get(name)
        if found is None:
            raise KeyError(f"no latent block {name!r}")
        return found

    @cached_property
    def constraint_matrix(self) -> np.ndarray:
        """All linear constraints on the latent vector, shape (k, total)."""
        rows = []
        for block in self.blocks:
            c = block.constraints
            if c.shape[0]:
                full = np.zeros((c.shape[0], self.total))
                full[:, block.index] = c
                rows.append(full)
        return np.vstack(rows) if rows else np.zeros((0, self.total))

    @property
    def roles(self) -> tuple[HyperRole, ...]:
        return tuple(b.role for b in self.blocks if b.role is not None)


# --- Assembled model ---


@dataclass(frozen=True)
class CovariateRecipe:
    """Everything needed to rebuild a covariate's design columns on new months."""

    name: str
    center: float
    scale: float
    exposure: Exposure
    lag_spec: SplineSpec
    window: LagWindow
    start: int
    stop: int

    @property
    def columns(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True, eq=False)
class DesignRows:
    """Fixed-effect design and offset for a set of (region, month) cells of a bundle."""

    design: np.ndarray
    offset: np.ndarray
    region_idx: np.ndarray
    month_idx: np.ndarray


@dataclass(frozen=True, eq=False)
class AssembledModel:
    spec: ModelSpec
    design: np.ndarray
    offset: np.ndarray
    response: np.ndarray
    cell_index: np.ndarray
    layout: LatentLayout
    a_matrix: sparse.csr_matrix
    recipes: tuple[CovariateRecipe, ...]
    column_names: tuple[str, ...]
    regions: tuple[str, ...]
    months: tuple[YearMonth, ...]
    years: tuple[int, ...]
    window: tuple[YearMonth, YearMonth]
    likelihood: Likelihood
    spatial: SpatialSpec | None = None

    @property
    def model_id(self) -> str:
        return self.spec.model_id

    @property
    def n_cells(self) -> int:
        return self.response.shape[0]

    @property
    def n_latent(self) -> int:
        return self.layout.total

    def cell_label(self, row: int) -> tuple[str, str]:
        i, t = self.cell_index[row]
        return self.regions[i], str(self.months[t])

    def linear_predictor(self, latent: np.ndarray) -> np.ndarray:
        return self.offset + self.a_matrix @ latent

    @property
    def hyper_roles(self) -> tuple[HyperRole, ...]:
        roles = list(self.likelihood.roles) + list(self.layout.roles)
        if any(b.inflated for b in self.layout.blocks):
            roles.append(HyperRole.D)
        return tuple(dict.fromkeys(roles))

    def free_roles(self, config: InferenceConfig) -> tuple[HyperRole, ...]:
        fixed = set()
        if config.fix_kappa is not None:
            fixed.add(HyperRole.KAPPA)
        if config.fix_d:
            fixed.add(HyperRole.D)
        return tuple(r for r in self.hyper_roles if r not in fixed)

    def initial_hyper(self, config: InferenceConfig) -> HyperParams:
        """kappa = 1 (or the fixed value), unit precisions and variances, d at its initial value."""
        roles = self.hyper_roles
        values: dict[HyperRole, float] = {r: 0.0 for r in roles}
        if config.fix_kappa is not None:
            values[HyperRole.KAPPA] = math.log(config.fix_kappa)
        if HyperRole.D in roles:
            values[HyperRole.D] = math.log(self.spatial.d if self.spatial is not None else self.spec.d_init)
        return HyperParams().replace(values)

    def initial_latent(self) -> np.ndarray:
        """Zeros, with the intercept at log(sum y / sum E)."""
        latent = np.zeros(self.n_latent)
        total = float(self.response.sum())
        if total > 0:
            latent[0] = math.log(total / float(np.exp(self.offset).sum()))
        return latent

    def prior_precision(self, hyper: HyperParams, config: InferenceConfig | None = None) -> sparse.csr_matrix:
        config = config or InferenceConfig()
        return sparse.block_diag(
            [b.precision(hyper, config.fixed_effect_variance) for b in self.layout.blocks], format="csr"
        )

    def log_prior_normalizer(self, hyper: HyperParams, config: InferenceConfig | None = None) -> float:
        config = config or InferenceConfig()
        return sum(b.log_normalizer(hyper, config.fixed_effect_variance) for b in self.layout.blocks)

    def coefficients(self, latent: np.ndarray, name: str) -> np.ndarray:
        """Cross-basis coefficients of one covariate."""
        for recipe in self.recipes:
            if recipe.name == name:
                return latent[recipe.columns]
        raise KeyError(f"no covariate {name!r} in model {self.model_id}")


def log_hyperprior(hyper: HyperParams, roles: Sequence[HyperRole], config: InferenceConfig | None = None) -> float:
    """Log-gamma prior on the log of each precision-type hyperparameter."""
    config = config or InferenceConfig()
    a, b = config.hyper_shape, config.hyper_rate
    total = 0.0
    for role in roles:
        theta = hyper.get(role)
        if role is HyperRole.SIGMA2_PHI:
            theta = -theta
        total += a * math.log(b) - gammaln(a) + a * theta - b * math.exp(theta)
    return float(total)


def _check_latent(latent: np.ndarray, model: AssembledModel) -> np.ndarray:
    x = np.asarray(latent, dtype=float)
    if x.shape != (model.n_latent,):
        raise ValueError(f"latent has shape {x.shape}, layout needs ({model.n_latent},)")
    return x


def joint_log_posterior(
    latent: np.ndarray, hyper: HyperParams, model: AssembledModel, config: InferenceConfig | None = None
) -> float:
    """Log likelihood + constant-free Gaussian log priors + hyperpriors."""
    x = _check_latent(latent, model)
    config = config or InferenceConfig()
    ll, _, _ = model.likelihood.derivatives(model.response, model.linear_predictor(x), hyper)
    value = float(ll.sum())
    for block in model.layout.blocks:
        xb = x[block.index]
        q = block.precision(hyper, config.fixed_effect_variance)
        value -= 0.5 * float(xb @ (q @ xb))
        if block.structure is not None:
            value += 0.5 * block.rank * math.log(hyper.multiplier(block.role))
    return value + log_hyperprior(hyper, model.hyper_roles, config)


def joint_gradient(
    latent: np.ndarray, hyper: HyperParams, model: AssembledModel, config: InferenceConfig | None = None
) -> np.ndarray:
    x = _check_latent(latent, model)
    _, d1, _ = model.likelihood.derivatives(model.response, model.linear_predictor(x), hyper)
    return model.a_matrix.T @ d1 - model.prior_precision(hyper, config) @ x


def joint_hessian(
    latent: np.ndarray, hyper: HyperParams, model: AssembledModel, config: InferenceConfig | None = None
) -> sparse.csr_matrix:
    """-(A' W A + Q): likelihood curvature plus block prior precisions, negated."""
    x = _check_latent(latent, model)
    _, _, d2 = model.likelihood.derivatives(model.response, model.linear_predictor(x), hyper)
    a = model.a_matrix
    curvature = a.T @ sparse.diags(-d2) @ a
    return (-(curvature + model.prior_precision(hyper, config))).tocsr()


# --- Assembly ---


def _standardized(panel: CovariatePanel, center: float, scale: float) -> CovariatePanel:
    return CovariatePanel(
        regions=panel.regions,
        months=panel.months,
        values=(panel.values - center) / scale,
        name=panel.name,
    )


def _make_recipe(name: str, spec: ModelSpec, bundle: PanelBundle, train: slice, start: int) -> CovariateRecipe:
    panel = bundle.covariate(name)
    window = spec.lag_window
    if name == AUTOREGRESSIVE_TERM:
        window = LagWindow(lag_min=max(window.lag_min, 1), lag_max=window.lag_max)
    center, scale = 0.0, 1.0
    if spec.standardize:
        training = panel.values[:, train]
        center, scale = float(training.mean()), float(training.std())
        if not scale > 0:
            raise ConfigError(f"covariate {name!r} is constant over the training window")
    exposure: Exposure = "linear"
    if spec.basis_kind is BasisKind.NONLINEAR:
        try:
            exposure = SplineSpec.from_quantiles((panel.values[:, train] - center) / scale)
        except ValidationError as e:
            raise ConfigError(f"cannot place exposure knots for {name!r}: {e}") from None
    lag_spec = default_lag_spec(window)
    width = exposure_df(exposure) * lag_spec.df
    return CovariateRecipe(name, center, scale, exposure, lag_spec, window, start, start + width)


def _recipe_block(recipe: CovariateRecipe, bundle: PanelBundle) -> np.ndarray:
    """Cross-basis columns of one recipe as (regions, months, columns)."""
    panel = _standardized(bundle.covariate(recipe.name), recipe.center, recipe.scale)
    return cross_basis(panel, recipe.window, recipe.exposure, recipe.lag_spec).block()


def assemble(
    spec: ModelSpec,
    bundle: PanelBundle,
    proximity: ProximityMatrix | None = None,
    *,
    window: tuple[YearMonth, YearMonth] | None = None,
    likelihood: Likelihood | None = None,
) -> AssembledModel:
    """Build design, offset, latent layout and the latent-to-predictor map for one spec."""
    window = window or bundle.training_window
    train = bundle.cases.window_slice(*window)
    n_regions = bundle.cases.n_regions
    likelihood = likelihood or NegativeBinomialLikelihood()

    recipes: list[CovariateRecipe] = []
    blocks = []
    names = ["intercept"]
    position = 1
    for name in spec.covariate_names:
        recipe = _make_recipe(name, spec, bundle, train, position)
        recipes.append(recipe)
        blocks.append(_recipe_block(recipe, bundle))
        position = recipe.stop
        for j in range(exposure_df(recipe.exposure)):
            for k in range(recipe.lag_spec.df):
                names.append(f"{name}[{j},{k}]")

    first = max([train.start] + [r.window.lag_max for r in recipes])
    usable = np.arange(first, train.stop)
    if usable.size == 0:
        raise InsufficientHistoryError(
            f"no usable rows in {window[0]}..{window[1]}: lags need {first - train.start} months of history"
        )
    region_idx = np.repeat(np.arange(n_regions), usable.size)
    month_idx = np.tile(usable, n_regions)

    design = np.column_stack(
        [np.ones(region_idx.size)] + [b[region_idx, month_idx, :] for b in blocks]
    )
    flat = np.flatnonzero(np.ptp(design[:, 1:], axis=0) == 0) if design.shape[1] > 1 else []
    if len(flat):
        raise ConfigError(f"design column {names[flat[0] + 1]} is constant over the usable rows")

    spatial = None
    if spec.structure is not None:
        spatial = SpatialSpec(spec.structure, proximity, spec.d_init)
        if proximity is not None and proximity.regions != bundle.regions:
            raise DataError("proximity matrix regions are not in panel order")

    layout_blocks = [LatentBlock("fixed", 0, design.shape[1])]
    columns = [sparse.csr_matrix(design)]
    n_rows = region_idx.size
    rows = np.arange(n_rows)

    if spec.include_monthly_effect:
        cyclic = cyclic_rw1_precision(12)
        start = layout_blocks[-1].stop
        layout_blocks.append(LatentBlock("phi", start, 12 * n_regions, cyclic, n_regions))
        calendar = np.array([bundle.months[t].month - 1 for t in month_idx])
        columns.append(sparse.csr_matrix((np.ones(n_rows), (rows, region_idx * 12 + calendar)), shape=(n_rows, 12 * n_regions)))

    years = tuple(sorted({m.year for m in bundle.months[train]}))
    if spatial is not None:
        structured, *unstructured = spatial.blocks(n_regions)
        year_of = {y: k for k, y in enumerate(years)}
        year_idx = np.array([year_of[bundle.months[t].year] for t in month_idx])
        start = layout_blocks[-1].stop
        layout_blocks.append(LatentBlock("theta", start, len(years) * n_regions, structured, len(years)))
        columns.append(
            sparse.csr_matrix(
                (np.ones(n_rows), (rows, year_idx * n_regions + region_idx)),
                shape=(n_rows, len(years) * n_regions),
            )
        )
        for extra in unstructured:
            start = layout_blocks[-1].stop
            layout_blocks.append(LatentBlock("v", start, n_regions, extra, 1))
            columns.append(sparse.csr_matrix((np.ones(n_rows), (rows, region_idx)), shape=(n_rows, n_regions)))

    model = AssembledModel(
        spec=spec,
        design=design,
        offset=bundle.expected.log_expected[region_idx, month_idx],
        response=bundle.cases.counts[region_idx, month_idx].astype(float),
        cell_index=np.column_stack([region_idx, month_idx]),
        layout=LatentLayout(tuple(layout_blocks)),
        a_matrix=sparse.hstack(columns, format="csr"),
        recipes=tuple(recipes),
        column_names=tuple(names),
        regions=bundle.regions,
        months=bundle.months,
        years=years,
        window=window,
        likelihood=likelihood,
        spatial=spatial,
    )
    logger.info(
        "Assembled %s: %d cells, %d fixed effects, latent dimension %d",
        spec.model_id,
        model.n_cells,
        design.shape[1],
        model.n_latent,
    )
    return model


def design_rows(model: AssembledModel, bundle: PanelBundle, months: Sequence[YearMonth]) -> DesignRows:
    """Fixed-effect rows for every region at `months`, rebuilt from the stored recipes."""
    if bundle.regions != model.regions:
        raise DataError("bundle regions do not match the fitted model")
    month_idx_1d = np.array([bundle.cases.month_index(m) for m in months], dtype=int)
    for recipe in model.recipes:
        short = month_idx_1d < recipe.window.lag_max
        if short.any():
            raise InsufficientHistoryError(
                f"covariate {recipe.name!r} lacks {recipe.window.lag_max} months of history before "
                f"{months[int(np.argmax(short))]}"
            )
    n_regions = len(bundle.regions)
    region_idx = np.repeat(np.arange(n_regions), month_idx_1d.size)
    month_idx = np.tile(month_idx_1d, n_regions)
    parts = [np.ones(region_idx.size)]
    for recipe in model.recipes:
        parts.append(_recipe_block(recipe, bundle)[region_idx, month_idx, :])
    design = np.column_stack(parts)
    if not np.all(np.isfinite(design)):
        raise InsufficientHistoryError("design rows contain unobserved covariate lags")
    return DesignRows(
        design=design,
        offset=bundle.expected.log_expected[region_idx, month_idx],
        region_idx=region_idx,
        month_idx=month_idx,
    )
