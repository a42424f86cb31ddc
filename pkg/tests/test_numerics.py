import math

import numpy as np
import pytest
from scipy import integrate, stats

from pdtriallab.errors import NotPositiveDefinite
from pdtriallab.numerics import (RngStream, cholesky, mvn_conditional,
                                 sample_inverse_wishart, sample_scaled_beta,
                                 student_t_two_sided_p)

from conftest import random_pd


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))

    def test_hand_checked_factor(self):
        # [[2,0],[1,2]] @ [[2,1],[0,2]] = [[4,2],[2,5]]
        L = cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]))
        np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, 2.0]], atol=1e-14)

    def test_indefinite_raises(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))  # eigenvalues 3, -1

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_reconstruction_round_trip(self):
        rng = np.random.default_rng(7)
        for dim in range(1, 11):
            m = random_pd(rng, dim)
            L = cholesky(m)
            err = np.linalg.norm(L @ L.T - m) / np.linalg.norm(m)
            assert err < 1e-10


class TestMvnConditional:
    def test_empty_conditioning_is_identity(self):
        mean = np.array([1.0, 2.0])
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        cm, cc = mvn_conditional(mean, cov, [], [])
        np.testing.assert_array_equal(cm, mean)
        np.testing.assert_array_equal(cc, cov)

    def test_bivariate_closed_form(self):
        rho = 0.5
        cov = np.array([[1.0, rho], [rho, 1.0]])
        cm, cc = mvn_conditional(np.zeros(2), cov, [0], [1.0])
        assert cm[0] == pytest.approx(0.5, abs=1e-12)
        assert cc[0, 0] == pytest.approx(0.75, abs=1e-12)

    def test_diagonal_independence(self):
        mean = np.array([1.0, -2.0, 3.0])
        cov = np.diag([1.0, 4.0, 9.0])
        cm, cc = mvn_conditional(mean, cov, [1], [10.0])
        np.testing.assert_allclose(cm, [1.0, 3.0], atol=1e-14)
        np.testing.assert_allclose(cc, np.diag([1.0, 9.0]), atol=1e-14)

    def test_full_conditioning_rejected(self):
        with pytest.raises(ValueError):
            mvn_conditional(np.zeros(2), np.eye(2), [0, 1], [0.0, 0.0])

    def test_composition_over_disjoint_sets(self):
        # conditioning on A then on B equals conditioning on A union B
        rng = np.random.default_rng(13)
        for _ in range(25):
            cov = random_pd(rng, 4)
            mean = rng.standard_normal(4)
            vals = rng.standard_normal(4)
            a, b = [0], [2]
            cm1, cc1 = mvn_conditional(mean, cov, a, vals[a])
            # remaining coordinates after conditioning on {0}: 1, 2, 3
            cm2, cc2 = mvn_conditional(cm1, cc1, [1], [vals[2]])
            cm_direct, cc_direct = mvn_conditional(
                mean, cov, [0, 2], [vals[0], vals[2]])
            np.testing.assert_allclose(cm2, cm_direct, atol=1e-8)
            np.testing.assert_allclose(cc2, cc_direct, atol=1e-8)


class TestScaledBeta:
    def test_moments_and_quantiles(self):
        rng = RngStream(99).generator()
        draws = sample_scaled_beta(rng, 2.0, 1.5, -25.0, 0.0, size=1_000_000)
        assert draws.min() >= -25.0 and draws.max() <= 0.0
        assert draws.mean() == pytest.approx(-75.0 / 7.0, abs=0.02)
        # exact quantiles of the re-scaled Beta(2, 1.5) law
        q25, q50, q75 = (-25.0 + 25.0 * stats.beta.ppf(q, 2, 1.5)
                         for q in (0.25, 0.5, 0.75))
        assert np.median(draws) == pytest.approx(q50, abs=0.05)
        assert np.median(draws) == pytest.approx(-10.34, abs=0.05)
        lo, hi = np.percentile(draws, [25, 75])
        assert lo == pytest.approx(q25, abs=0.1)
        assert hi == pytest.approx(q75, abs=0.1)
        assert lo == pytest.approx(-15.14, abs=0.1)
        assert hi == pytest.approx(-5.97, abs=0.1)

    def test_degenerate_range(self):
        rng = RngStream(1).generator()
        assert sample_scaled_beta(rng, 2.0, 1.5, 0.0, 0.0) == 0.0

    def test_invalid_parameters(self):
        rng = RngStream(1).generator()
        with pytest.raises(ValueError):
            sample_scaled_beta(rng, 0.0, 1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            sample_scaled_beta(rng, 1.0, 1.0, 1.0, 0.0)


class TestInverseWishart:
    def test_univariate_mean(self):
        # dim 1 reduces to a scaled inverse chi-square with mean 1/(dof-2)
        rng = RngStream(5).generator()
        draws = [sample_inverse_wishart(rng, np.eye(1), 5.0)[0, 0]
                 for _ in range(100_000)]
        assert np.mean(draws) == pytest.approx(1.0 / 3.0, abs=0.01)

    def test_bivariate_mean(self):
        rng = RngStream(6).generator()
        acc = np.zeros((2, 2))
        for _ in range(100_000):
            acc += sample_inverse_wishart(rng, np.eye(2), 6.0)
        np.testing.assert_allclose(acc / 100_000, np.eye(2) / 3.0, atol=0.02)

    def test_draws_symmetric_positive_definite(self):
        rng = RngStream(7).generator()
        scale = random_pd(np.random.default_rng(3), 4)
        for _ in range(50):
            d = sample_inverse_wishart(rng, scale, 8.0)
            np.testing.assert_array_equal(d, d.T)
            assert np.linalg.eigvalsh(d).min() > 0

    def test_dof_bound(self):
        rng = RngStream(8).generator()
        with pytest.raises(ValueError):
            sample_inverse_wishart(rng, np.eye(3), 2.0)


def _t_density(x: float, df: float) -> float:
    # Student-t density written from scratch for the integration oracle
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2))
    return c / math.sqrt(df * math.pi) * (1 + x * x / df) ** (-(df + 1) / 2)


class TestStudentT:
    def test_symmetry_at_zero(self):
        assert student_t_two_sided_p(0.0, 5.0) == 1.0

    def test_normal_limit(self):
        assert student_t_two_sided_p(1.96, 1e6) == pytest.approx(0.05, abs=2e-4)

    def test_t_table_value(self):
        assert student_t_two_sided_p(2.228, 10.0) == pytest.approx(0.050, abs=1e-3)

    def test_against_quadrature_oracle(self):
        for t, df in ((2.228, 10.0), (1.0, 3.0), (3.5, 7.0)):
            tail, _ = integrate.quad(_t_density, abs(t), np.inf, args=(df,))
            assert student_t_two_sided_p(t, df) == pytest.approx(2 * tail, abs=1e-8)

    def test_monotone_in_magnitude(self):
        ps = [student_t_two_sided_p(t, 12.0) for t in (0.0, 0.5, 1.0, 2.0, 4.0)]
        assert all(a > b for a, b in zip(ps, ps[1:]))

    def test_invalid_df(self):
        with pytest.raises(ValueError):
            student_t_two_sided_p(1.0, 0.0)


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(42).child(1, 2, 3).generator().random(10)
        b = RngStream(42).child(1, 2, 3).generator().random(10)
        np.testing.assert_array_equal(a, b)

    def test_distinct_keys_differ(self):
        a = RngStream(42).child(1, 2, 3).generator().random(10)
        b = RngStream(42).child(1, 2, 4).generator().random(10)
        c = RngStream(43).child(1, 2, 3).generator().random(10)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_child_composition(self):
        assert RngStream(7).child(1).child(2).key == (1, 2)
        assert RngStream(7).child(1, 2).key == (1, 2)
