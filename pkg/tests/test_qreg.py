import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ivqr_risk.qreg import (
    ParameterError,
    RankError,
    check_loss,
    fit_quantile,
    hall_sheather,
    kernel_bandwidth,
    qreg_cov,
)

from oracles import brute_force_qr, random_qr_instance


def test_matches_enumeration_on_random_instances():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        X, y, tau = random_qr_instance(rng)
        best, _ = brute_force_qr(X, y, tau)
        fit = fit_quantile(X, y, tau)
        worst = max(worst, abs(fit.objective - best) / max(abs(best), 1e-300))
    assert worst <= 1e-10
    assert time.perf_counter() - start < 60


class TestCheckLoss:
    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(0.01, 0.99))
    def test_identities(self, u, tau):
        assert check_loss(u, tau) >= 0
        assert check_loss(u, tau) == pytest.approx(u * (tau - (u < 0)))
        assert check_loss(u, tau) + check_loss(-u, tau) == pytest.approx(abs(u))
        assert check_loss(u, tau) - check_loss(-u, 1 - tau) == pytest.approx(0.0, abs=1e-9)

    def test_zero(self):
        assert check_loss(0.0, 0.3) == 0.0

    def test_vectorised(self):
        np.testing.assert_allclose(check_loss([-2.0, 0.0, 3.0], 0.25), [1.5, 0.0, 0.75])


class TestFitQuantile:
    def test_intercept_only_is_sample_quantile(self):
        y = np.array([3.0, 1.0, 7.0, 2.0, 9.0, 4.0, 8.0])
        fit = fit_quantile(np.ones((7, 1)), y, 0.5)
        assert fit.coefficients[0] == 4.0
        assert fit.converged

    def test_tie_goes_to_smallest_vertex(self):
        fit = fit_quantile(np.ones((5, 1)), np.arange(1.0, 6.0), 0.8)
        assert fit.coefficients[0] == 4.0
        assert fit.degenerate_ties

    def test_exact_line(self):
        x = np.linspace(0, 1, 20)
        X = np.column_stack([np.ones(20), x])
        fit = fit_quantile(X, 2 + 3 * x, 0.3)
        np.testing.assert_allclose(fit.coefficients, [2, 3], atol=1e-12)
        assert fit.objective == pytest.approx(0.0, abs=1e-12)

    def test_basis_interpolates(self):
        rng = np.random.default_rng(3)
        X, y, tau = random_qr_instance(rng)
        fit = fit_quantile(X, y, tau)
        np.testing.assert_allclose(fit.residuals[fit.basis], 0.0, atol=1e-9)

    def test_warm_start_same_answer(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(500), rng.normal(size=(500, 2))])
        y = X @ [1, 2, -1] + rng.normal(size=500)
        a = fit_quantile(X, y, 0.5)
        b = fit_quantile(X, y + 0.01 * X[:, 1], 0.5, start_basis=a.basis)
        c = fit_quantile(X, y + 0.01 * X[:, 1], 0.5)
        assert b.objective == pytest.approx(c.objective, rel=1e-12)

    def test_slope_recovered_at_scale(self):
        rng = np.random.default_rng(11)
        n = 2000
        x = rng.normal(size=n)
        y = 1 + 2 * x + rng.normal(size=n)
        fit = fit_quantile(np.column_stack([np.ones(n), x]), y, 0.8)
        assert fit.coefficients[1] == pytest.approx(2.0, abs=0.1)
        assert fit.coefficients[0] == pytest.approx(1 + stats.norm.ppf(0.8), abs=0.1)

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5, float("nan")])
    def test_bad_tau(self, tau):
        with pytest.raises(ParameterError):
            fit_quantile(np.ones((5, 1)), np.arange(5.0), tau)

    def test_collinear_names_columns(self):
        x = np.arange(10.0)
        X = np.column_stack([np.ones(10), x, 2 * x])
        with pytest.raises(RankError, match="x1|x2"):
            fit_quantile(X, x, 0.5, names=("const", "x1", "x2"))

    def test_record(self):
        fit = fit_quantile(np.ones((3, 1)), [1.0, 2.0, 3.0], 0.5, names=("const",))
        rec = fit.to_record()
        assert rec["coefficients"] == {"const": 2.0}
        assert rec["ses"] is None

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 0.9), st.floats(-5, 5), st.floats(0.1, 10))
    def test_equivariance(self, seed, tau, shift, scale):
        rng = np.random.default_rng(seed)
        n = 25
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = rng.normal(size=n)
        base = fit_quantile(X, y, tau)
        moved = fit_quantile(X, scale * y + shift, tau)
        assert moved.objective == pytest.approx(scale * base.objective, rel=1e-9, abs=1e-9)
        flipped = fit_quantile(X, -y, 1 - tau)
        assert flipped.objective == pytest.approx(base.objective, rel=1e-9, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 0.95))
    def test_sign_balance(self, seed, tau):
        # subgradient optimality for the intercept: below-share <= tau <= at-or-below share
        rng = np.random.default_rng(seed)
        n = 40
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        fit = fit_quantile(X, rng.normal(size=n), tau)
        r = fit.residuals
        tol = 1e-9
        assert np.mean(r < -tol) <= tau + 1e-12
        assert np.mean(r <= tol) >= tau - 1e-12


class TestCovariance:
    def test_hall_sheather_reference(self):
        # closed form at the median: n^(-1/3) z^(2/3) (1.5 phi(0)^2)^(1/3)
        z = stats.norm.ppf(0.975)
        want = 100 ** (-1 / 3) * z ** (2 / 3) * (1.5 * stats.norm.pdf(0) ** 2) ** (1 / 3)
        assert hall_sheather(100, 0.5) == pytest.approx(want, rel=1e-14)

    def test_zero_spread(self):
        with pytest.raises(ParameterError):
            kernel_bandwidth(np.zeros(10), 0.5)

    def test_bad_bandwidth(self):
        rng = np.random.default_rng(0)
        X = np.ones((50, 1))
        fit = fit_quantile(X, rng.normal(size=50), 0.5)
        with pytest.raises(ParameterError):
            qreg_cov(fit, X, bandwidth=-1.0)

    def test_median_se_matches_asymptotics(self):
        # iid N(0,1): se(median) ~ sqrt(tau(1-tau)) / (phi(0) sqrt(n))
        rng = np.random.default_rng(7)
        n = 4000
        X = np.ones((n, 1))
        fit = fit_quantile(X, rng.normal(size=n), 0.5)
        se = np.sqrt(qreg_cov(fit, X)[0, 0])
        want = 0.5 / stats.norm.pdf(0) / np.sqrt(n)
        assert se == pytest.approx(want, rel=0.15)

    @pytest.mark.slow
    def test_coverage_location_scale(self):
        hits = 0
        reps = 200
        for s in range(reps):
            rng = np.random.default_rng(1000 + s)
            n = 500
            x = rng.uniform(0, 2, n)
            y = 1 + x + (1 + 0.5 * x) * rng.normal(size=n)
            X = np.column_stack([np.ones(n), x])
            fit = fit_quantile(X, y, 0.8)
            se = np.sqrt(np.diag(qreg_cov(fit, X)))
            truth = 1 + 0.5 * stats.norm.ppf(0.8)
            hits += abs(fit.coefficients[1] - truth) <= 1.96 * se[1]
        assert 0.90 <= hits / reps <= 0.99

    def test_symmetric_psd(self):
        rng = np.random.default_rng(2)
        n = 300
        X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
        fit = fit_quantile(X, rng.normal(size=n), 0.3)
        V = qreg_cov(fit, X)
        np.testing.assert_array_equal(V, V.T)
        assert np.linalg.eigvalsh(V).min() > 0
