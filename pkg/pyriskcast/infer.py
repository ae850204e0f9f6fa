"""Empirical-Bayes Laplace fitting and posterior diagnostics.

The inner loop finds the latent mode for fixed hyperparameters by constrained
Newton iterations; the outer loop maximizes the Laplace-approximate marginal
posterior of the log-hyperparameters with Nelder-Mead. Everything downstream
(sampling, DIC, CPO, fitted risks) works from the constrained Gaussian
approximation at the mode.

Usage:
    model = assemble(spec, bundle, proximity)
    fit = fit_model(model, InferenceConfig(seed=7))
    diag = diagnostics(fit, model, n_samples=2000, seed=7)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from scipy.special import logsumexp

from .exceptions import NumericalError
from .models import HyperParams, InferenceConfig
from .model import (
    LOG_2PI,
    AssembledModel,
    joint_gradient,
    joint_hessian,
    joint_log_posterior,
    log_hyperprior,
)
from .structures import ConstrainedGaussian

logger = logging.getLogger(__name__)

MAX_HALVINGS = 40
# Newton decrement below which a stalled line search counts as converged (roundoff floor).
DECREMENT_FLOOR = 1e-13
# Objective value for hyperparameters whose inner problem fails.
FAILED_OBJECTIVE = 1e30
SAMPLE_CHUNK = 250
CELL_CHUNK = 1000


@dataclass(frozen=True)
class FitIterations:
    newton: int
    newton_total: int = 0
    objective_evaluations: int = 0
    restarts: int = 0
    outer_converged: bool = True


@dataclass(frozen=True, eq=False)
class PosteriorFit:
    """Mode, curvature and hyperparameters of one fitted model."""

    model_id: str
    latent_mode: np.ndarray
    latent_precision: sparse.csr_matrix
    constraints: np.ndarray
    hyper_hat: HyperParams
    log_marginal: float
    fitted_eta: np.ndarray
    converged: bool
    iterations: FitIterations
    gradient_trace: tuple[float, ...] = field(default=())

    @cached_property
    def approximation(self) -> ConstrainedGaussian:
        return ConstrainedGaussian(self.latent_precision, self.constraints)

    def require_converged(self) -> None:
        if not self.converged:
            raise NumericalError(f"fit {self.model_id} did not converge", trace=self.gradient_trace)

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(np.clip(self.approximation.marginal_variance(), 0.0, None))

    def _repr_html_(self) -> str:
        from ._repr import fit_html

        return fit_html(self)


@dataclass(frozen=True)
class _Mode:
    latent: np.ndarray
    precision: sparse.csr_matrix
    approximation: ConstrainedGaussian
    value: float
    iterations: int
    trace: tuple[float, ...]


def _feasible(latent: np.ndarray, constraints: np.ndarray) -> np.ndarray:
    """Euclidean projection onto C x = 0."""
    if not constraints.shape[0]:
        return latent
    gram = constraints @ constraints.T
    return latent - constraints.T @ np.linalg.solve(gram, constraints @ latent)


def _safe_joint(latent, hyper, model, config) -> float:
    try:
        value = joint_log_posterior(latent, hyper, model, config)
    except (NumericalError, FloatingPointError, OverflowError):
        return -math.inf
    return value if math.isfinite(value) else -math.inf


def find_mode(
    model: AssembledModel,
    hyper: HyperParams,
    config: InferenceConfig | None = None,
    start: np.ndarray | None = None,
) -> _Mode:
    """Constrained Newton ascent on the joint log posterior with step halving."""
    config = config or InferenceConfig()
    constraints = model.layout.constraint_matrix
    x = _feasible(model.initial_latent() if start is None else np.array(start, dtype=float), constraints)
    value = _safe_joint(x, hyper, model, config)
    if not math.isfinite(value):
        x = _feasible(model.initial_latent(), constraints)
        value = _safe_joint(x, hyper, model, config)
    if not math.isfinite(value):
        raise NumericalError("joint log posterior is not finite at the starting point")

    trace: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for iteration in range(1, config.newton_max_iter + 1):
            gradient = joint_gradient(x, hyper, model, config)
            precision = (-joint_hessian(x, hyper, model, config)).tocsr()
            approx = ConstrainedGaussian(precision, constraints)
            gnorm = float(np.max(np.abs(_feasible(gradient, constraints)))) if gradient.size else 0.0
            trace.append(gnorm)
            if gnorm < config.newton_tol:
                return _Mode(x, precision, approx, value, iteration, tuple(trace))

            step = approx.correct(approx.solve(gradient))
            decrement = float(gradient @ step)
            t = 1.0
            for _ in range(MAX_HALVINGS):
                candidate = x + t * step
                candidate_value = _safe_joint(candidate, hyper, model, config)
                if candidate_value >= value:
                    break
                t *= 0.5
            else:
                if decrement <= DECREMENT_FLOOR * max(1.0, abs(value)):
                    logger.debug("Newton stalled at roundoff (decrement %.3e)", decrement)
                    return _Mode(x, precision, approx, value, iteration, tuple(trace))
                raise NumericalError("line search could not increase the joint log posterior", trace=trace)
            logger.debug(
                "Newton %d: |grad| %.3e, step %.3g, objective %.10g", iteration, gnorm, t, candidate_value
            )
            x, value = candidate, candidate_value
    raise NumericalError(
        f"inner Newton loop did not converge in {config.newton_max_iter} iterations", trace=trace
    )


def laplace_log_marginal(model: AssembledModel, hyper: HyperParams, mode: _Mode, config: InferenceConfig) -> float:
    """log p(y | hyper) by the Laplace approximation with linear constraints."""
    constraints = model.layout.constraint_matrix
    k = constraints.shape[0]
    n = model.n_latent
    log_joint = mode.value - log_hyperprior(hyper, model.hyper_roles, config)
    # det of P on the constraint surface = |A| |C A^-1 C'| / |C C'| for A = P + C'C.
    log_gaussian_at_mode = (
        -0.5 * (n - k) * LOG_2PI
        + 0.5 * mode.approximation.log_det
        + 0.5 * mode.approximation.log_det_schur
    )
    if k:
        log_gaussian_at_mode -= 0.5 * float(np.linalg.slogdet(constraints @ constraints.T)[1])
    return log_joint + model.log_prior_normalizer(hyper, config) - log_gaussian_at_mode


def _build_fit(model, hyper, mode, config, iterations: FitIterations) -> PosteriorFit:
    return PosteriorFit(
        model_id=model.model_id,
        latent_mode=mode.latent,
        latent_precision=mode.precision,
        constraints=model.layout.constraint_matrix,
        hyper_hat=hyper,
        log_marginal=laplace_log_marginal(model, hyper, mode, config),
        fitted_eta=model.linear_predictor(mode.latent),
        converged=True,
        iterations=iterations,
        gradient_trace=mode.trace,
    )


def fit_at(
    model: AssembledModel,
    hyper: HyperParams,
    config: InferenceConfig | None = None,
    start: np.ndarray | None = None,
) -> PosteriorFit:
    """Laplace fit with the hyperparameters held fixed."""
    config = config or InferenceConfig()
    mode = find_mode(model, hyper, config, start)
    return _build_fit(model, hyper, mode, config, FitIterations(newton=mode.iterations, newton_total=mode.iterations))


def fit_model(model: AssembledModel, config: InferenceConfig | None = None) -> PosteriorFit:
    """Empirical-Bayes fit: hyperparameters at the Laplace marginal-posterior mode."""
    config = config or InferenceConfig()
    base = model.initial_hyper(config)
    roles = model.free_roles(config)
    if not roles:
        return fit_at(model, base, config)

    lo, hi = config.log_hyper_bounds
    start_vector = np.array([base.get(r) for r in roles])
    state = {"latent": model.initial_latent(), "evaluations": 0, "newton": 0, "best": None}

    def hyper_of(vector: np.ndarray) -> HyperParams:
        return base.replace(dict(zip(roles, np.clip(vector, lo, hi))))

    def objective(vector: np.ndarray) -> float:
        hyper = hyper_of(vector)
        state["evaluations"] += 1
        try:
            mode = find_mode(model, hyper, config, state["latent"])
        except NumericalError as e:
            logger.debug("Inner loop failed at %s: %s", np.round(vector, 4), e)
            return FAILED_OBJECTIVE
        state["latent"] = mode.latent
        state["newton"] += mode.iterations
        value = -(laplace_log_marginal(model, hyper, mode, config) + log_hyperprior(hyper, model.hyper_roles, config))
        if not math.isfinite(value):
            return FAILED_OBJECTIVE
        best = state["best"]
        if best is None or value < best[0]:
            state["best"] = (value, hyper, mode)
        return value

    rng = np.random.default_rng(config.seed)
    starts = [start_vector] + [
        start_vector + rng.normal(0.0, config.restart_jitter, size=len(roles)) for _ in range(config.n_restarts - 1)
    ]
    outer_converged = False
    for i, start in enumerate(starts):
        result = minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={"xatol": config.simplex_xatol, "fatol": 1e-6, "maxiter": config.simplex_max_iter},
        )
        outer_converged = outer_converged or bool(result.success)
        logger.debug("Restart %d: objective %.10g, success %s", i, result.fun, result.success)

    if state["best"] is None:
        raise NumericalError(f"no hyperparameter value gave a convergent inner loop for {model.model_id}")
    _, hyper_hat, mode = state["best"]
    iterations = FitIterations(
        newton=mode.iterations,
        newton_total=state["newton"],
        objective_evaluations=state["evaluations"],
        restarts=len(starts),
        outer_converged=outer_converged,
    )
    fit = _build_fit(model, hyper_hat, mode, config, iterations)
    logger.info(
        "Fitted %s: log marginal %.4f after %d objective evaluations (%d Newton steps)",
        model.model_id,
        fit.log_marginal,
        iterations.objective_evaluations,
        iterations.newton_total,
    )
    if not outer_converged:
        logger.warning("Simplex search for %s stopped at its iteration limit", model.model_id)
    return fit


# --- Posterior summaries ---


def sample_latent(fit: PosteriorFit, n: int, seed: int) -> np.ndarray:
    """Draws from the constrained Gaussian approximation, shape (n, dim)."""
    fit.require_converged()
    rng = np.random.default_rng(seed)
    return fit.latent_mode + fit.approximation.sample(rng, n)


def _log_likelihood_chunks(fit: PosteriorFit, model: AssembledModel, samples: np.ndarray):
    for s0 in range(0, samples.shape[0], SAMPLE_CHUNK):
        chunk = samples[s0 : s0 + SAMPLE_CHUNK]
        eta = model.offset[None, :] + (model.a_matrix @ chunk.T).T
        ll, _, _ = model.likelihood.derivatives(model.response[None, :], eta, fit.hyper_hat)
        yield ll


def _deviance(fit: PosteriorFit, model: AssembledModel, latent: np.ndarray) -> float:
    ll, _, _ = model.likelihood.derivatives(model.response, model.linear_predictor(latent), fit.hyper_hat)
    return -2.0 * float(ll.sum())


@dataclass(frozen=True)
class DicResult:
    dic: float
    pd: float
    mean_deviance: float
    deviance_at_mean: float


@dataclass(frozen=True, eq=False)
class CvResult:
    score: float
    cpo: np.ndarray
    cv: np.ndarray
    flagged: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class FitDiagnostics:
    dic: float
    pd: float
    cv_log_score: float
    cpo: np.ndarray
    flagged: tuple[int, ...] = ()


def _dic_from(fit, model, samples) -> DicResult:
    total = 0.0
    for ll in _log_likelihood_chunks(fit, model, samples):
        total += float(ll.sum())
    mean_deviance = -2.0 * total / samples.shape[0]
    # The Gaussian approximation's mean is the mode.
    at_mean = _deviance(fit, model, fit.latent_mode)
    pd = mean_deviance - at_mean
    return DicResult(dic=mean_deviance + pd, pd=pd, mean_deviance=mean_deviance, deviance_at_mean=at_mean)


def _cv_from(fit, model, samples) -> CvResult:
    n = samples.shape[0]
    log_sum = np.full(model.n_cells, -np.inf)
    log_sum_sq = np.full(model.n_cells, -np.inf)
    for ll in _log_likelihood_chunks(fit, model, samples):
        log_sum = np.logaddexp(log_sum, logsumexp(-ll, axis=0))
        log_sum_sq = np.logaddexp(log_sum_sq, logsumexp(-2.0 * ll, axis=0))
    log_cpo = math.log(n) - log_sum
    bad = np.flatnonzero(~np.isfinite(log_cpo))
    if bad.size:
        raise NumericalError("CPO accumulation overflowed", cell=model.cell_label(int(bad[0])))
    with np.errstate(over="ignore"):
        cv = np.sqrt(np.clip(n * np.exp(log_sum_sq - 2.0 * log_sum) - 1.0, 0.0, None))
    flagged = tuple(int(i) for i in np.flatnonzero(cv > 1.0))
    if flagged:
        logger.warning(
            "%s: %d cells have unstable CPO estimates (coefficient of variation > 1)", model.model_id, len(flagged)
        )
    return CvResult(score=float(-np.mean(log_cpo)), cpo=np.exp(log_cpo), cv=cv, flagged=flagged)


def dic(fit: PosteriorFit, model: AssembledModel, n_samples: int = 2000, seed: int = 0) -> DicResult:
    """Deviance information criterion from posterior samples of the latent field."""
    return _dic_from(fit, model, sample_latent(fit, n_samples, seed))


def cv_log_score(fit: PosteriorFit, model: AssembledModel, n_samples: int = 2000, seed: int = 0) -> CvResult:
    """Mean -log CPO over all usable cells, CPO by the harmonic-mean estimator."""
    return _cv_from(fit, model, sample_latent(fit, n_samples, seed))


def diagnostics(fit: PosteriorFit, model: AssembledModel, n_samples: int = 2000, seed: int = 0) -> FitDiagnostics:
    """DIC and CV log-score from one shared set of samples."""
    samples = sample_latent(fit, n_samples, seed)
    d = _dic_from(fit, model, samples)
    cv = _cv_from(fit, model, samples)
    return FitDiagnostics(dic=d.dic, pd=d.pd, cv_log_score=cv.score, cpo=cv.cpo, flagged=cv.flagged)


@dataclass(frozen=True, eq=False)
class RiskSummary:
    """Posterior relative risk per usable training cell (and optionally predictive counts)."""

    regions: tuple[str, ...]
    region_idx: np.ndarray
    month_idx: np.ndarray
    rr_mean: np.ndarray
    rr_lo: np.ndarray
    rr_hi: np.ndarray
    cases_mean: np.ndarray | None = None
    cases_lo: np.ndarray | None = None
    cases_hi: np.ndarray | None = None
    level: float = 0.95


def _quantile_bounds(level: float) -> tuple[float, float]:
    tail = (1.0 - level) / 2.0
    return tail, 1.0 - tail


def fitted_relative_risk(
    fit: PosteriorFit,
    model: AssembledModel,
    n_samples: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    counts: bool = False,
) -> RiskSummary:
    """Posterior mean and empirical quantiles of exp(eta - log E) per cell."""
    samples = sample_latent(fit, n_samples, seed)
    q_lo, q_hi = _quantile_bounds(level)
    n = model.n_cells
    rr_mean, rr_lo, rr_hi = np.empty(n), np.empty(n), np.empty(n)
    cases = (np.empty(n), np.empty(n), np.empty(n)) if counts else None
    count_rng = np.random.default_rng([seed, 1])
    for c0 in range(0, n, CELL_CHUNK):
        rows = slice(c0, min(c0 + CELL_CHUNK, n))
        lin = model.a_matrix[rows] @ samples.T
        rr = np.exp(lin)
        rr_mean[rows] = rr.mean(axis=1)
        rr_lo[rows], rr_hi[rows] = np.quantile(rr, [q_lo, q_hi], axis=1)
        if cases is not None:
            draws = model.likelihood.sample(model.offset[rows, None] + lin, fit.hyper_hat, count_rng)
            cases[0][rows] = draws.mean(axis=1)
            cases[1][rows], cases[2][rows] = np.quantile(draws, [q_lo, q_hi], axis=1)
    return RiskSummary(
        regions=model.regions,
        region_idx=model.cell_index[:, 0],
        month_idx=model.cell_index[:, 1],
        rr_mean=rr_mean,
        rr_lo=rr_lo,
        rr_hi=rr_hi,
        cases_mean=None if cases is None else cases[0],
        cases_lo=None if cases is None else cases[1],
        cases_hi=None if cases is None else cases[2],
        level=level,
    )


@dataclass(frozen=True, eq=False)
class RandomEffectSummary:
    """Posterior mean and interval of monthly (region x calendar month) and yearly spatial effects."""

    phi_mean: np.ndarray | None
    phi_lo: np.ndarray | None
    phi_hi: np.ndarray | None
    theta_mean: np.ndarray | None
    theta_lo: np.ndarray | None
    theta_hi: np.ndarray | None
    years: tuple[int, ...]
    v_mean: np.ndarray | None = None


def random_effect_summary(
    fit: PosteriorFit, model: AssembledModel, n_samples: int = 2000, seed: int = 0, level: float = 0.95
) -> RandomEffectSummary:
    samples = sample_latent(fit, n_samples, seed)
    q_lo, q_hi = _quantile_bounds(level)
    n_regions = len(model.regions)

    def summarize(name: str, shape: Sequence[int]):
        block = model.layout.get(name)
        if block is None:
            return None, None, None
        draws = samples[:, block.index]
        lo, hi = np.quantile(draws, [q_lo, q_hi], axis=0)
        return draws.mean(axis=0).reshape(shape), lo.reshape(shape), hi.reshape(shape)

    phi = summarize("phi", (n_regions, 12))
    theta = summarize("theta", (len(model.years), n_regions))
    v = summarize("v", (n_regions,))
    return RandomEffectSummary(*phi, *theta, years=model.years, v_mean=v[0])


def fixed_effect_intervals(fit: PosteriorFit, level: float = 0.95, n_fixed: int | None = None) -> np.ndarray:
    """Gaussian (mean, lower, upper) rows for the leading fixed-effect coordinates."""
    from scipy.stats import norm

    sd = fit.marginal_sd()
    k = n_fixed if n_fixed is not None else len(sd)
    z = float(norm.ppf(0.5 + level / 2.0))
    mean = fit.latent_mode[:k]
    return np.column_stack([mean, mean - z * sd[:k], mean + z * sd[:k]])
