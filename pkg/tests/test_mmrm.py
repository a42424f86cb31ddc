import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from pdtriallab.errors import ConvergenceFailure, RankDeficient
from pdtriallab.estimands import ESTIMATORS, DesignMatrices, build_design, mask_for_estimand
from pdtriallab.mmrm import _Objective, _group_patterns, fit_mmrm, observed_loglik
from conftest import random_pd


def make_design(X, y, eligible=None):
    n, J, p = X.shape
    if eligible is None:
        eligible = np.isfinite(y)
    return DesignMatrices(
        X=X, y=y, present=np.isfinite(y), fit_eligible=eligible,
        columns=[f"c{j}" for j in range(p)],
        arm=np.zeros(n, dtype=np.int8), baseline=np.zeros(n),
    )


class TestObservedLoglik:
    def test_standard_normal_point(self):
        X = np.ones((1, 1, 1))
        y = np.zeros((1, 1))
        des = make_design(X, y)
        ll = observed_loglik(np.zeros(1), np.eye(1), des)
        assert ll == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_complete_data_matches_mvn_density(self):
        rng = np.random.default_rng(5)
        n, J, p = 12, 3, 2
        X = rng.standard_normal((n, J, p))
        beta = np.array([1.0, -0.5])
        sigma = random_pd(rng, J)
        y = np.einsum("njp,p->nj", X, beta) + rng.multivariate_normal(
            np.zeros(J), sigma, size=n)
        des = make_design(X, y)
        expected = sum(
            stats.multivariate_normal.logpdf(y[i], X[i] @ beta, sigma)
            for i in range(n))
        assert observed_loglik(beta, sigma, des) == pytest.approx(expected, abs=1e-8)

    def test_marginalization_against_quadrature(self):
        # one incomplete subject: the observed-data density must equal the
        # joint density integrated over the missing coordinate
        rng = np.random.default_rng(9)
        n, J, p = 3, 2, 2
        X = rng.standard_normal((n, J, p))
        beta = np.array([0.7, 0.2])
        sigma = np.array([[2.0, 0.8], [0.8, 1.5]])
        y = np.einsum("njp,p->nj", X, beta) + rng.multivariate_normal(
            np.zeros(J), sigma, size=n)
        y[1, 1] = np.nan
        des = make_design(X, y)

        def joint(y1, i):
            vec = np.array([y[i, 0], y1])
            return stats.multivariate_normal.pdf(vec, X[i] @ beta, sigma)

        expected = (stats.multivariate_normal.logpdf(y[0], X[0] @ beta, sigma)
                    + stats.multivariate_normal.logpdf(y[2], X[2] @ beta, sigma)
                    + math.log(integrate.quad(joint, -60, 60, args=(1,))[0]))
        assert observed_loglik(beta, sigma, des) == pytest.approx(expected, abs=1e-6)

    def test_subjects_without_eligible_visits_contribute_zero(self):
        X = np.ones((2, 1, 1))
        y = np.array([[0.0], [np.nan]])
        des = make_design(X, y)
        only_first = make_design(X[:1], y[:1])
        assert observed_loglik(np.zeros(1), np.eye(1), des) == pytest.approx(
            observed_loglik(np.zeros(1), np.eye(1), only_first), abs=1e-12)


def _cell_means_design(rng, n_per_arm=14, J=3):
    """Balanced two-group data with a saturated group-by-visit design."""
    p = 2 * J
    n = 2 * n_per_arm
    X = np.zeros((n, J, p))
    arm = np.repeat([0, 1], n_per_arm)
    for j in range(J):
        X[np.arange(n), j, arm * J + j] = 1.0
    mean = np.array([[1.0, 2.0, 3.0], [0.5, 1.0, 4.0]])
    sigma = np.array([[2.0, 0.7, 0.3], [0.7, 1.5, 0.5], [0.3, 0.5, 1.8]])
    y = mean[arm] + rng.multivariate_normal(np.zeros(J), sigma, size=n)
    return make_design(X, y), arm, y


class TestFitMmrm:
    def test_ml_saturated_fit_is_cell_means(self):
        rng = np.random.default_rng(21)
        des, arm, y = _cell_means_design(rng)
        fit = fit_mmrm(des, reml=False, ftol=1e-14, gtol=1e-7)
        J = 3
        for g in (0, 1):
            np.testing.assert_allclose(
                fit.beta[g * J:(g + 1) * J], y[arm == g].mean(axis=0), atol=1e-6)
        resid = y - np.array([fit.beta[:J], fit.beta[J:]])[arm]
        pooled_ml = resid.T @ resid / y.shape[0]  # divisor N
        np.testing.assert_allclose(fit.sigma, pooled_ml, atol=1e-5)

    def test_reml_saturated_uses_small_sample_divisor(self):
        rng = np.random.default_rng(22)
        des, arm, y = _cell_means_design(rng)
        fit = fit_mmrm(des, reml=True, ftol=1e-14, gtol=1e-7)
        J = 3
        resid = y - np.array([fit.beta[:J], fit.beta[J:]])[arm]
        pooled_reml = resid.T @ resid / (y.shape[0] - 2)  # divisor N - groups
        np.testing.assert_allclose(fit.sigma, pooled_reml, atol=1e-5)

    def test_single_visit_reduces_to_ols(self):
        rng = np.random.default_rng(23)
        n, p = 40, 2
        X = np.zeros((n, 1, p))
        X[:, 0, 0] = 1.0
        X[:, 0, 1] = rng.standard_normal(n)
        y = (2.0 + 1.5 * X[:, 0, 1] + rng.standard_normal(n) * 0.8)[:, None]
        des = make_design(X, y)
        fit = fit_mmrm(des, reml=True, ftol=1e-14, gtol=1e-7)
        coef, res, *_ = np.linalg.lstsq(X[:, 0, :], y[:, 0], rcond=None)
        np.testing.assert_allclose(fit.beta, coef, atol=1e-7)
        resid = y[:, 0] - X[:, 0, :] @ coef
        assert fit.sigma[0, 0] == pytest.approx(
            resid @ resid / (n - p), rel=1e-5)  # REML divisor N - p

    def test_monotone_instance_matches_independent_optimizer(self):
        # tiny REML problem solved with an independently coded objective
        # and a generic direct-search optimizer
        rng = np.random.default_rng(31)
        n, J, p = 8, 3, 2
        X = np.zeros((n, J, p))
        X[:, :, 0] = 1.0
        X[:, :, 1] = np.repeat([0, 1], n // 2)[:, None]
        sigma_true = np.array([[1.5, 0.6, 0.3], [0.6, 1.2, 0.4], [0.3, 0.4, 1.0]])
        y = (X @ np.array([1.0, -0.8])
             + rng.multivariate_normal(np.zeros(J), sigma_true, size=n))
        y[5, 2] = np.nan
        y[6, 1:] = np.nan
        des = make_design(X, y)
        fit = fit_mmrm(des, reml=True)

        def oracle_reml(theta):
            L = np.zeros((J, J))
            L[np.tril_indices(J)] = theta
            L[np.diag_indices(J)] = np.exp(np.clip(np.diag(L), -30, 30))
            sig = L @ L.T
            H = np.zeros((p, p))
            g = np.zeros(p)
            for i in range(n):
                obs = np.flatnonzero(np.isfinite(y[i]))
                so = sig[np.ix_(obs, obs)]
                xi = X[i][obs]
                si = np.linalg.inv(so)
                H += xi.T @ si @ xi
                g += xi.T @ si @ y[i, obs]
            beta = np.linalg.solve(H, g)
            ll = 0.0
            for i in range(n):
                obs = np.flatnonzero(np.isfinite(y[i]))
                so = sig[np.ix_(obs, obs)]
                ll += stats.multivariate_normal.logpdf(
                    y[i, obs], X[i][obs] @ beta, so)
            sign, logdet_h = np.linalg.slogdet(H)
            return -(ll - 0.5 * logdet_h + 0.5 * p * math.log(2 * math.pi))

        best = math.inf
        for seed in range(6):
            r = optimize.minimize(
                oracle_reml,
                np.random.default_rng(seed).standard_normal(J * (J + 1) // 2) * 0.3,
                method="Nelder-Mead",
                options={"maxiter": 6000, "xatol": 1e-9, "fatol": 1e-12})
            best = min(best, r.fun)
        assert fit.loglik == pytest.approx(-best, abs=1e-3)
        assert fit.loglik >= -best - 1e-6

    def test_profiled_gls_maximizes_mean_parameters(self, small_trial):
        an = mask_for_estimand(small_trial, ESTIMATORS["MAR_MIX"])
        des = build_design(an)
        fit = fit_mmrm(des)
        base = observed_loglik(fit.beta, fit.sigma, des)
        rng = np.random.default_rng(3)
        for _ in range(5):
            delta = rng.standard_normal(fit.beta.shape) * 0.05
            assert observed_loglik(fit.beta + delta, fit.sigma, des) < base

    def test_visit_shift_equivariance(self, small_trial):
        an = mask_for_estimand(small_trial, ESTIMATORS["MAR_HYP"])
        des = build_design(an)
        fit = fit_mmrm(des)
        shifted = make_design(des.X.copy(), des.y.copy(), des.fit_eligible.copy())
        c, v = 7.5, 3
        shifted.y[:, v] = shifted.y[:, v] + c
        fit2 = fit_mmrm(shifted)
        J = 6
        expected = fit.beta.copy()
        expected[v] += c          # placebo cell at the shifted visit
        expected[J + v] += c      # active cell at the shifted visit
        np.testing.assert_allclose(fit2.beta, expected, atol=2e-4)
        np.testing.assert_allclose(fit2.sigma, fit.sigma, atol=2e-4)

    def test_complete_data_collapses_to_visitwise_ols(self):
        # identical per-visit regressors and no missing data: the joint
        # generalized-least-squares fit equals each visit's own least squares
        rng = np.random.default_rng(51)
        n, J = 60, 3
        arm = np.repeat([0.0, 1.0], n // 2)
        covar = rng.uniform(20, 40, n)
        p = 3 * J
        X = np.zeros((n, J, p))
        for j in range(J):
            X[:, j, j] = 1.0
            X[:, j, J + j] = arm
            X[:, j, 2 * J + j] = covar
        y = (5 + 2 * arm[:, None] + 0.3 * covar[:, None]
             + rng.multivariate_normal(np.zeros(J), random_pd(rng, J), size=n))
        des = make_design(X, y)
        fit = fit_mmrm(des, reml=True, ftol=1e-14, gtol=1e-7)
        for j in range(J):
            cols = [j, J + j, 2 * J + j]
            coef, *_ = np.linalg.lstsq(X[:, j, cols], y[:, j], rcond=None)
            np.testing.assert_allclose(fit.beta[cols], coef, atol=1e-6)

    def test_analytic_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(41)
        n, J, p = 20, 3, 2
        X = rng.standard_normal((n, J, p))
        y = rng.standard_normal((n, J)) * 1.3 + 0.4
        y[3, 2] = np.nan
        y[8, 0] = np.nan
        des = make_design(X, y)
        patterns = _group_patterns(des.X, des.y, des.fit_eligible)
        for reml in (True, False):
            obj = _Objective(patterns, J, p, reml=reml)
            theta = rng.standard_normal(J * (J + 1) // 2) * 0.2
            _, grad = obj.value_and_grad(theta)
            eps = 1e-6
            for k in range(theta.size):
                tp, tm = theta.copy(), theta.copy()
                tp[k] += eps
                tm[k] -= eps
                fd = (obj.value_and_grad(tp)[0] - obj.value_and_grad(tm)[0]) / (2 * eps)
                assert grad[k] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_iteration_cap_raises(self, small_trial):
        an = mask_for_estimand(small_trial, ESTIMATORS["MAR_MIX"])
        des = build_design(an)
        with pytest.raises(ConvergenceFailure) as err:
            fit_mmrm(des, max_iter=1)
        assert err.value.reason == "iteration_cap"
        assert err.value.diagnostics is not None

    def test_no_eligible_data_raises(self):
        X = np.ones((2, 2, 1))
        y = np.full((2, 2), np.nan)
        with pytest.raises(RankDeficient):
            fit_mmrm(make_design(X, y))

    def test_converged_fit_reports_metadata(self, small_trial):
        an = mask_for_estimand(small_trial, ESTIMATORS["MAR_HYP"])
        des = build_design(an)
        fit = fit_mmrm(des)
        assert fit.converged
        assert fit.reml
        assert fit.n_iterations > 0
        assert np.isfinite(fit.loglik)
        assert np.linalg.eigvalsh(fit.sigma).min() > 0
        assert np.linalg.eigvalsh(fit.beta_vcov).min() > 0
        assert fit.columns == des.columns
