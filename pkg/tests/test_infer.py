"""Tests for the Laplace fit, posterior sampling and fit diagnostics."""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import sparse, stats
from scipy.special import logsumexp

from pyriskcast import (
    CasePanel,
    ConstrainedGaussian,
    ExpectedPanel,
    GaussianLikelihood,
    HyperParams,
    InferenceConfig,
    ModelSpec,
    NumericalError,
    PanelBundle,
    PopulationPanel,
    assemble,
    cv_log_score,
    diagnostics,
    dic,
    fit_at,
    fit_model,
    fitted_relative_risk,
    fixed_effect_intervals,
    joint_gradient,
    joint_hessian,
    nb_log_pmf,
    random_effect_summary,
    sample_latent,
)
from pyriskcast._utils import YearMonth, month_range
from pyriskcast.infer import find_mode
from pyriskcast.model import log_hyperprior

ICAR_HYPER = HyperParams(log_kappa=math.log(20.0), log_sigma2_phi=math.log(0.1), log_tau_theta=math.log(5.0))


def _small_bundle(counts, population=10_000.0):
    counts = np.asarray(counts)
    n_regions, n_months = counts.shape
    regions = tuple(f"R{i}" for i in range(n_regions))
    months = month_range(YearMonth(2000, 1), YearMonth(2000, 1).shift(n_months - 1))
    years = tuple(sorted({m.year for m in months}))
    cases = CasePanel(regions=regions, months=months, counts=counts)
    pop = PopulationPanel(regions=regions, years=years, population=np.full((n_regions, len(years)), population))
    return PanelBundle.build(cases, pop, [], (months[0], months[-1]))


@pytest.fixture
def icar_fit(icar_model):
    return fit_at(icar_model, ICAR_HYPER)


@pytest.fixture
def null_fit(null_model):
    return fit_at(null_model, HyperParams(log_kappa=math.log(30.0)))


class TestGaussianConjugate:
    """A Gaussian likelihood makes the Laplace approximation exact."""

    VARIANCE = 4.0

    @pytest.fixture
    def model(self, bundle):
        return assemble(ModelSpec.null(), bundle, likelihood=GaussianLikelihood(self.VARIANCE))

    def test_mode_is_posterior_mean(self, model):
        """The intercept mode matches the closed-form conjugate posterior mean."""
        fit = fit_model(model)
        resid = model.response - model.offset
        precision = len(resid) / self.VARIANCE + 1 / 1000.0
        assert fit.latent_mode[0] == pytest.approx(resid.sum() / self.VARIANCE / precision, rel=1e-9)
        assert fit.marginal_sd()[0] == pytest.approx(1 / math.sqrt(precision), rel=1e-9)

    def test_log_marginal_is_exact(self, model):
        """The Laplace marginal equals the Gaussian marginal likelihood."""
        fit = fit_model(model)
        resid = model.response - model.offset
        n = len(resid)
        cov = self.VARIANCE * np.eye(n) + 1000.0 * np.ones((n, n))
        exact = stats.multivariate_normal.logpdf(resid, np.zeros(n), cov)
        assert fit.log_marginal == pytest.approx(exact, rel=1e-9)

    def test_no_free_hyperparameters(self, model):
        """Nothing to optimize means a single inner fit."""
        fit = fit_model(model)
        assert fit.iterations.objective_evaluations == 0
        assert fit.hyper_hat.log_kappa == 0.0


class TestFindMode:
    """Tests for the inner Newton loop."""

    def test_single_cell_mode(self):
        """y=3, E=1 with kappa fixed at 10 puts the intercept mode near log 3."""
        bundle = _small_bundle([[3]])
        bundle = replace(
            bundle, expected=ExpectedPanel(regions=bundle.regions, months=bundle.months, expected=np.ones((1, 1)))
        )
        fit = fit_model(assemble(ModelSpec.null(), bundle), InferenceConfig(fix_kappa=10.0))
        assert fit.latent_mode[0] == pytest.approx(math.log(3.0), abs=1e-3)

    def test_gradient_vanishes_at_mode(self, icar_model, icar_fit):
        """The constrained gradient at the mode is below tolerance."""
        assert icar_fit.gradient_trace[-1] < 1e-8
        np.testing.assert_allclose(icar_model.layout.constraint_matrix @ icar_fit.latent_mode, 0.0, atol=1e-9)

    def test_iteration_limit(self, icar_model):
        """Running out of Newton iterations raises with the gradient trace attached."""
        with pytest.raises(NumericalError) as err:
            find_mode(icar_model, ICAR_HYPER, InferenceConfig(newton_max_iter=1))
        assert len(err.value.trace) == 1

    def test_warm_start_gives_same_mode(self, icar_model, icar_fit):
        """Starting from the mode returns the mode."""
        again = find_mode(icar_model, ICAR_HYPER, start=icar_fit.latent_mode)
        np.testing.assert_allclose(again.latent, icar_fit.latent_mode, atol=1e-7)
        assert again.iterations <= 2


class TestLatentPrecision:
    """The curvature the mode search factors is flat only along constrained directions."""

    @pytest.fixture
    def curvature(self, icar_model):
        p = (-joint_hessian(icar_model.initial_latent(), ICAR_HYPER, icar_model)).toarray()
        return p, icar_model.layout.constraint_matrix

    def test_common_shift_is_flat(self, icar_model, curvature):
        """Raising every monthly effect and lowering every yearly effect leaves eta and the prior unchanged."""
        p, c = curvature
        v = np.zeros(icar_model.n_latent)
        v[icar_model.layout.block("phi").index] = 1.0
        v[icar_model.layout.block("theta").index] = -1.0
        np.testing.assert_allclose(icar_model.a_matrix @ v, 0.0, atol=1e-12)
        assert abs(v @ p @ v) < 1e-9 * (v @ v) * np.abs(p).max()
        assert np.abs(c @ v).max() > 1.0

    def test_augmented_precision_is_positive_definite(self, curvature):
        """P + C'C has no null direction."""
        p, c = curvature
        eigenvalues = np.linalg.eigvalsh(p + c.T @ c)
        assert eigenvalues.min() > 1e-10 * eigenvalues.max()

    def test_factor_matches_dense(self, curvature):
        p, c = curvature
        approx = ConstrainedGaussian(sparse.csr_matrix(p), c)
        assert approx.log_det == pytest.approx(np.linalg.slogdet(p + c.T @ c)[1], rel=1e-10)

    def test_newton_step_solves_kkt_system(self, icar_model, curvature):
        """The kriging-corrected step equals the KKT solution with the singular P itself."""
        p, c = curvature
        gradient = joint_gradient(icar_model.initial_latent(), ICAR_HYPER, icar_model)
        approx = ConstrainedGaussian(p, c)
        step = approx.correct(approx.solve(gradient))
        k = c.shape[0]
        kkt = np.block([[p, c.T], [c, np.zeros((k, k))]])
        expected = np.linalg.solve(kkt, np.concatenate([gradient, np.zeros(k)]))[: len(gradient)]
        np.testing.assert_allclose(step, expected, rtol=1e-6, atol=1e-8 * np.abs(expected).max())

    def test_icar_model_fits(self, icar_model, fast_inference):
        """The empirical-Bayes fit of the ICAR model with monthly effects converges."""
        fit = fit_model(icar_model, fast_inference)
        assert fit.converged
        assert np.all(np.isfinite(fit.marginal_sd()))


class TestFitModel:
    """Tests for the empirical-Bayes outer loop."""

    def test_null_intercept_near_zero(self, null_model, fast_inference):
        """Expected counts built from the training rate leave alpha close to 0."""
        fit = fit_model(null_model, fast_inference)
        assert fit.converged
        assert abs(fit.latent_mode[0]) < 0.05
        assert fit.hyper_hat.kappa > 1.0

    def test_improves_on_starting_point(self, icar_model, fast_inference):
        """The selected hyperparameters score at least as well as the initial ones."""
        fit = fit_model(icar_model, fast_inference)
        start = icar_model.initial_hyper(fast_inference)
        baseline = fit_at(icar_model, start, fast_inference)
        roles = icar_model.hyper_roles
        assert fit.log_marginal + log_hyperprior(fit.hyper_hat, roles, fast_inference) >= (
            baseline.log_marginal + log_hyperprior(start, roles, fast_inference) - 1e-6
        )
        assert fit.iterations.restarts == 1
        assert fit.iterations.objective_evaluations > 0

    def test_fixed_kappa_is_respected(self, null_model):
        """fix_kappa removes kappa from the search."""
        fit = fit_model(null_model, InferenceConfig(fix_kappa=12.0))
        assert fit.hyper_hat.kappa == pytest.approx(12.0)
        assert fit.iterations.objective_evaluations == 0

    def test_require_converged(self, null_fit):
        """A fit marked as not converged refuses to be sampled."""
        with pytest.raises(NumericalError, match="did not converge"):
            sample_latent(replace(null_fit, converged=False), 10, 0)


class TestDiagnostics:
    """Tests for sampling, DIC and CPO."""

    def test_sample_latent(self, icar_fit, icar_model):
        """Draws are centred on the mode and satisfy the constraints."""
        draws = sample_latent(icar_fit, 3000, seed=2)
        assert draws.shape == (3000, icar_model.n_latent)
        sd = icar_fit.marginal_sd()
        assert np.all(np.abs(draws.mean(axis=0) - icar_fit.latent_mode) <= 5 * sd / math.sqrt(3000) + 1e-12)
        np.testing.assert_allclose(draws @ icar_model.layout.constraint_matrix.T, 0.0, atol=1e-8)

    def test_sampling_is_seeded(self, null_fit):
        """The same seed gives the same draws."""
        np.testing.assert_array_equal(sample_latent(null_fit, 50, 9), sample_latent(null_fit, 50, 9))

    def test_effective_parameters_of_null_model(self, null_fit, null_model):
        """An intercept-only model has about one effective parameter."""
        result = dic(null_fit, null_model, n_samples=4000, seed=1)
        assert 0.5 < result.pd < 2.0
        assert result.dic == pytest.approx(result.mean_deviance + result.pd)

    def test_cpo_matches_exact_leave_one_out(self):
        """Harmonic-mean CPO agrees with quadrature on a 20-cell model within 5%."""
        rng = np.random.default_rng(11)
        bundle = _small_bundle(rng.poisson(20, size=(2, 10)))
        kappa = 50.0
        model = assemble(ModelSpec.null(), bundle)
        fit = fit_model(model, InferenceConfig(fix_kappa=kappa))
        result = cv_log_score(fit, model, n_samples=8000, seed=1)

        sd = fit.marginal_sd()[0]
        grid = np.linspace(fit.latent_mode[0] - 12 * sd, fit.latent_mode[0] + 12 * sd, 4001)
        mu = np.exp(model.offset[None, :] + grid[:, None])
        ll, _, _ = nb_log_pmf(model.response[None, :], mu, kappa)
        log_post = ll.sum(axis=1) - grid**2 / 2000.0
        log_w = log_post - logsumexp(log_post)
        exact = np.exp(-logsumexp(log_w[:, None] - ll, axis=0))
        np.testing.assert_allclose(result.cpo, exact, rtol=0.05)
        assert result.score == pytest.approx(-np.mean(np.log(exact)), rel=0.05)

    def test_diagnostics_share_samples(self, null_fit, null_model):
        """The combined call agrees with the separate ones at the same seed."""
        both = diagnostics(null_fit, null_model, n_samples=500, seed=4)
        assert both.dic == pytest.approx(dic(null_fit, null_model, n_samples=500, seed=4).dic)
        cv = cv_log_score(null_fit, null_model, n_samples=500, seed=4)
        assert both.cv_log_score == pytest.approx(cv.score)
        assert both.cpo.shape == (null_model.n_cells,)
        assert both.flagged == cv.flagged


class TestPosteriorSummaries:
    """Tests for fitted risks and random-effect summaries."""

    def test_fitted_relative_risk_ordering(self, icar_fit, icar_model):
        """Intervals bracket the mean and counts are produced on request."""
        summary = fitted_relative_risk(icar_fit, icar_model, n_samples=500, seed=0, counts=True)
        assert summary.rr_mean.shape == (icar_model.n_cells,)
        assert np.all(summary.rr_lo <= summary.rr_mean)
        assert np.all(summary.rr_mean <= summary.rr_hi)
        assert np.all(summary.cases_lo <= summary.cases_hi)
        np.testing.assert_array_equal(summary.region_idx, icar_model.cell_index[:, 0])

    def test_collapsed_posterior(self, null_fit, null_model):
        """With a near-infinite precision the interval collapses onto exp(eta - log E)."""
        tight = replace(null_fit, latent_precision=null_fit.latent_precision * 1e16)
        summary = fitted_relative_risk(tight, null_model, n_samples=200, seed=0)
        point = np.exp(null_model.linear_predictor(null_fit.latent_mode) - null_model.offset)
        np.testing.assert_allclose(summary.rr_lo, point, rtol=1e-6)
        np.testing.assert_allclose(summary.rr_mean, point, rtol=1e-6)
        np.testing.assert_allclose(summary.rr_hi, point, rtol=1e-6)
        assert summary.cases_mean is None

    def test_random_effect_shapes(self, icar_fit, icar_model):
        """Monthly effects are region x calendar month and yearly fields are year x region."""
        effects = random_effect_summary(icar_fit, icar_model, n_samples=300, seed=0)
        assert effects.phi_mean.shape == (3, 12)
        assert effects.theta_mean.shape == (6, 3)
        assert effects.v_mean is None
        assert effects.years == tuple(range(2000, 2006))
        np.testing.assert_allclose(effects.phi_mean.sum(axis=1), 0.0, atol=1e-8)
        np.testing.assert_allclose(effects.theta_mean.sum(axis=1), 0.0, atol=1e-8)

    def test_fixed_effect_intervals(self, icar_fit):
        """Rows are (mean, lower, upper) with half-width 1.96 sd."""
        rows = fixed_effect_intervals(icar_fit, 0.95, n_fixed=4)
        assert rows.shape == (4, 3)
        sd = icar_fit.marginal_sd()[:4]
        np.testing.assert_allclose(rows[:, 0], icar_fit.latent_mode[:4])
        np.testing.assert_allclose(rows[:, 2] - rows[:, 1], 2 * stats.norm.ppf(0.975) * sd)
