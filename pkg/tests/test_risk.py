import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ivqr_risk.data import EstimationDataset
from ivqr_risk.qreg import QuantileFit
from ivqr_risk.risk import (
    DEFAULT_TAUS,
    ContrastError,
    GridFitError,
    QuantileGridFit,
    TailRiskError,
    block_bootstrap_gap_se,
    fit_quantile_grid,
    fitted_quantile_series,
    group_contrast,
    predict_quantiles,
    predictive_density,
    rearrange,
    tail_risk,
)

from conftest import exogenous_dataset


def grid_from_values(values, taus=DEFAULT_TAUS):
    """Intercept-only grid whose tau-prediction is ``values[k]``."""
    fits = {
        t: QuantileFit(t, np.array([v]), np.zeros(3), 0.0, names=("const",))
        for t, v in zip(taus, values)
    }
    return QuantileGridFit(tuple(taus), fits, "qr", names=("const",))


def gaussian_ds(n=5000, seed=20240601, sigma=1.0):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 2, n)
    x = rng.normal(size=n)
    y = 0.5 + 1.0 * d + 0.5 * x + sigma * rng.normal(size=n)
    return EstimationDataset(y, d, np.column_stack([x, np.ones(n)]), d[:, None],
                             x_names=("x", "const"))


def central_sup_error(dens, mu, sigma):
    y = np.linspace(mu + sigma * stats.norm.ppf(0.1), mu + sigma * stats.norm.ppf(0.9), 2001)
    return float(np.abs(dens.pdf(y) - stats.norm.pdf(y, mu, sigma)).max())


class TestRearrange:
    def test_sorts(self):
        np.testing.assert_array_equal(rearrange([1.0, 3.0, 2.0]), [1.0, 2.0, 3.0])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            rearrange([1.0, np.nan])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=30))
    def test_monotone_permutation(self, values):
        out = rearrange(values)
        assert np.all(np.diff(out) >= 0)
        np.testing.assert_array_equal(np.sort(values), out)
        np.testing.assert_array_equal(rearrange(out), out)


class TestPredictiveDensity:
    def test_linear_quantile_gives_uniform(self):
        taus = np.array(DEFAULT_TAUS)
        dens = predictive_density(grid_from_values(2.0 + 3.0 * taus), {})
        np.testing.assert_allclose(dens.density, 1.0 / (3.0 * 0.96), rtol=1e-9)
        assert dens.support[0] == pytest.approx(2.0 + 3.0 * 0.02)
        assert dens.support[-1] == pytest.approx(2.0 + 3.0 * 0.98)

    def test_exact_normal_quantiles_within_bound(self):
        # noise-free error of the construction: step density renormalized over
        # the 0.02..0.98 mass; reference from a 200k-point direct evaluation
        dens = predictive_density(grid_from_values(stats.norm.ppf(DEFAULT_TAUS)), {})
        err = central_sup_error(dens, 0.0, 1.0)
        assert err == pytest.approx(0.036984, abs=2e-4)
        assert err <= 0.05

    def test_inverts_to_grid(self):
        vals = stats.norm.ppf(DEFAULT_TAUS) * 1.7 + 0.3
        dens = predictive_density(grid_from_values(vals), {})
        np.testing.assert_allclose(dens.quantile(DEFAULT_TAUS), vals, atol=1e-6)

    def test_tail_extension_uses_outer_slopes(self):
        vals = stats.norm.ppf(DEFAULT_TAUS)
        dens = predictive_density(grid_from_values(vals), {})
        lo_slope = (vals[1] - vals[0]) / 0.05
        assert dens.knot_values[0] == pytest.approx(vals[0] - lo_slope * 0.08)
        assert dens.knot_taus[0] == 0.02 and dens.knot_taus[-1] == 0.98

    def test_crossing_is_rearranged(self):
        vals = np.linspace(-1, 1, 17)
        vals[[4, 5]] = vals[[5, 4]]
        dens = predictive_density(grid_from_values(vals), {})
        assert np.all(np.diff(dens.quantiles) > 0)
        assert np.all(dens.density >= 0)

    def test_level_shift(self):
        dens = predictive_density(grid_from_values(np.linspace(-1, 1, 17)), {}, level=4.0)
        np.testing.assert_allclose(dens.level_support, dens.support + 4.0)

    def test_tails_must_bracket(self):
        with pytest.raises(ValueError):
            predictive_density(grid_from_values(np.linspace(-1, 1, 17)), {}, tails=(0.2, 0.98))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=17, max_size=17))
    def test_integrates_to_one(self, values):
        dens = predictive_density(grid_from_values(values), {})
        assert dens.integral() == pytest.approx(1.0, abs=1e-6)
        assert np.all(dens.density >= 0)
        assert np.all(np.diff(dens.quantiles) > 0)

    def test_subnormal_gap_treated_as_tie(self):
        dens = predictive_density(grid_from_values([0.0] * 16 + [-2.2250738585e-313]), {})
        assert np.all(np.isfinite(dens.density))
        assert dens.integral() == pytest.approx(1.0, abs=1e-6)

    def test_conditioning_vector_and_dict_agree(self):
        g = fit_quantile_grid(exogenous_dataset(n=300, seed=1), taus=(0.2, 0.4, 0.6, 0.8))
        a = predictive_density(g, {"d": 1.0, "x0": 0.5}, tails=(0.1, 0.9))
        b = predictive_density(g, [1.0, 0.5, 1.0], tails=(0.1, 0.9))
        np.testing.assert_array_equal(a.density, b.density)

    def test_missing_conditioning(self):
        g = fit_quantile_grid(exogenous_dataset(n=300, seed=1), taus=(0.2, 0.4, 0.6, 0.8))
        with pytest.raises(ValueError, match="x0"):
            predict_quantiles(g, {"d": 1.0})


class TestGridFit:
    def test_default_taus(self):
        assert DEFAULT_TAUS[0] == 0.10 and DEFAULT_TAUS[-1] == 0.90 and len(DEFAULT_TAUS) == 17

    def test_coefficient_table(self):
        ds = exogenous_dataset(n=300, seed=2)
        g = fit_quantile_grid(ds, taus=(0.25, 0.5, 0.75))
        rows = g.coefficient_table()
        assert len(rows) == 3 * len(ds.regressor_names)
        assert all(r["se"] > 0 for r in rows)

    def test_bad_taus(self):
        ds = exogenous_dataset(n=100)
        with pytest.raises(ValueError):
            fit_quantile_grid(ds, taus=(0.5, 0.3))
        with pytest.raises(ValueError):
            fit_quantile_grid(ds, taus=(0.0, 0.5))

    def test_failures_recorded_then_fatal(self):
        ds = exogenous_dataset(n=100)
        ds = EstimationDataset(ds.y, ds.d, ds.X, np.empty((ds.n, 0)))
        with pytest.raises(GridFitError) as info:
            fit_quantile_grid(ds, taus=(0.3, 0.5), estimator="ivqr_grid")
        assert set(info.value.failures) == {0.3, 0.5}

    def test_fitted_series(self):
        ds = exogenous_dataset(n=200)
        g = fit_quantile_grid(ds, taus=(0.8,))
        fitted = fitted_quantile_series(g.fit_at(0.8), ds)
        assert np.mean(ds.y <= fitted) == pytest.approx(0.8, abs=0.02)


class TestTailRisk:
    @pytest.fixture(scope="class")
    @classmethod
    def grid(cls):
        return fit_quantile_grid(exogenous_dataset(n=400, seed=4), taus=(0.5, 0.8))

    def test_report(self, grid):
        rep = tail_risk(grid, 0.8, group="A", horizon_months=12, instrument="iv")
        assert rep.inflation_coefficient == grid.fit_at(0.8).coefficients[0]
        assert rep.z_score == pytest.approx(rep.inflation_coefficient / rep.inflation_se)
        assert [r["term"] for r in rep.to_rows()] == list(grid.names)

    def test_missing_tau(self, grid):
        with pytest.raises(TailRiskError):
            tail_risk(grid, 0.9)

    def test_single_fit_wrong_tau(self, grid):
        with pytest.raises(TailRiskError):
            tail_risk(grid.fit_at(0.5), 0.8)


class TestContrast:
    @pytest.fixture(scope="class")
    @classmethod
    def reports(cls):
        a = tail_risk(fit_quantile_grid(exogenous_dataset(n=400, seed=5), taus=(0.8,)), 0.8,
                      group="A", horizon_months=12)
        b = tail_risk(fit_quantile_grid(exogenous_dataset(n=400, seed=6), taus=(0.8,)), 0.8,
                      group="B", horizon_months=12)
        return a, b

    def test_independent(self, reports):
        a, b = reports
        c = group_contrast(a, b)
        assert c.coefficient_gap == a.inflation_coefficient - b.inflation_coefficient
        assert c.gap_se == pytest.approx(np.hypot(a.inflation_se, b.inflation_se))
        assert c.z_score == pytest.approx(c.coefficient_gap / c.gap_se)

    def test_antisymmetric(self, reports):
        a, b = reports
        assert group_contrast(a, b).z_score == -group_contrast(b, a).z_score

    def test_mismatch(self, reports):
        a, b = reports
        from dataclasses import replace
        with pytest.raises(ContrastError):
            group_contrast(a, replace(b, horizon_months=36))

    def test_bootstrap_mode_needs_se(self, reports):
        with pytest.raises(ContrastError):
            group_contrast(*reports, covariance_mode="block_bootstrap")
        c = group_contrast(*reports, covariance_mode="block_bootstrap", gap_se=0.5)
        assert c.gap_se == 0.5

    def test_block_bootstrap_gap_se(self):
        n = 240
        t = np.arange(np.datetime64("2000-01"), np.datetime64("2000-01") + n)
        rng = np.random.default_rng(0)
        d = rng.uniform(0, 2, n)
        common = rng.normal(size=n)

        def ds(scale):
            y = d + common + scale * rng.normal(size=n)
            return EstimationDataset(y, d, np.ones((n, 1)), d[:, None], t_index=t)

        se = block_bootstrap_gap_se(ds(0.5), ds(0.5), 0.8, reps=50, seed=1)
        again = block_bootstrap_gap_se(ds(0.5), ds(0.5), 0.8, reps=50, seed=1)
        assert se > 0 and np.isfinite(se)
        assert isinstance(again, float)
