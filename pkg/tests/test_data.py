import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivqr_risk.data import (
    DatasetSpec,
    DesignError,
    EstimationDataset,
    InputError,
    TimeSeriesPanel,
    build_design,
    diff_horizon,
    load_csv,
    parse_month,
    summarize,
    yoy_change,
)


def monthly(start, n):
    return np.arange(np.datetime64(start, "M"), np.datetime64(start, "M") + n)


class TestLoadCsv:
    def test_three_rows_one_series(self, write_csv):
        panel = load_csv(write_csv("date,UR\n2000-01,4.0\n2000-02,4.1\n2000-03,4.3\n"))
        assert panel.names == ["UR"]
        assert panel.dates.size == 3
        np.testing.assert_array_equal(panel["UR"], [4.0, 4.1, 4.3])

    def test_blank_cell_is_missing_not_zero(self, write_csv):
        panel = load_csv(write_csv("date,UR,X\n2000-01,4.0,1\n2000-02,,2\n2000-03,4.3,3\n"))
        assert np.isnan(panel["UR"][1])
        assert panel["X"][1] == 2.0

    def test_day_of_month_ignored_and_gaps_filled(self, write_csv):
        panel = load_csv(write_csv("date,UR\n2000-01-31,1\n2000-03-01,3\n"))
        assert panel.dates.size == 3
        assert np.isnan(panel["UR"][1])

    def test_named_date_column(self, write_csv):
        panel = load_csv(write_csv("UR,month\n4.0,2000-01\n5.0,2000-02\n"), date_column="month")
        np.testing.assert_array_equal(panel["UR"], [4.0, 5.0])

    def test_bad_date_names_row(self, write_csv):
        with pytest.raises(InputError, match="row 3"):
            load_csv(write_csv("date,UR\n2000-01,1\nJan 2000,2\n"))

    def test_duplicate_month(self, write_csv):
        with pytest.raises(InputError, match="duplicate month 2000-01"):
            load_csv(write_csv("date,UR\n2000-01,1\n2000-01-15,2\n"))

    def test_non_numeric(self, write_csv):
        with pytest.raises(InputError, match="non-numeric"):
            load_csv(write_csv("date,UR\n2000-01,abc\n"))

    def test_column_order_irrelevant(self, write_csv):
        a = load_csv(write_csv("date,A,B\n2000-01,1,2\n2000-02,3,4\n", "a.csv"))
        b = load_csv(write_csv("date,B,A\n2000-01,2,1\n2000-02,4,3\n", "b.csv"))
        for k in "AB":
            np.testing.assert_array_equal(a[k], b[k])

    def test_yyyymm_letter_format(self):
        assert parse_month("1976M6") == np.datetime64("1976-06")


class TestDiffHorizon:
    def test_constant_series(self):
        out = diff_horizon(np.full(40, 5.0), 12)
        np.testing.assert_array_equal(out[:28], 0.0)
        assert np.isnan(out[28:]).all()

    def test_direct_subtraction(self):
        v = np.full(13, np.nan)
        v[0], v[12] = 4.0, 6.5
        assert diff_horizon(v, 12)[0] == 2.5

    def test_missing_propagates(self):
        v = np.arange(5.0)
        v[3] = np.nan
        out = diff_horizon(v, 2)
        assert np.isnan(out[1]) and np.isnan(out[3]) and out[0] == 2.0

    def test_rejects_bad_horizon(self):
        with pytest.raises(ValueError):
            diff_horizon(np.arange(5.0), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=5, max_size=60),
           st.integers(1, 12), st.integers(0, 10))
    def test_time_equivariance(self, values, h, k):
        v = np.array(values)
        shifted = np.concatenate([np.full(k, np.nan), v])
        np.testing.assert_array_equal(diff_horizon(shifted, h)[k:], diff_horizon(v, h))


class TestYoy:
    def test_percent_change(self):
        v = np.full(13, 100.0)
        v[12] = 103.0
        assert yoy_change(v, "percent_change")[12] == pytest.approx(3.0, abs=1e-12)

    def test_constant_index(self):
        out = yoy_change(np.full(30, 250.0), "percent_change")
        np.testing.assert_array_equal(out[12:], 0.0)
        assert np.isnan(out[:12]).all()

    def test_rate_difference(self):
        v = np.arange(24.0)
        np.testing.assert_array_equal(yoy_change(v, "rate_difference")[12:], 12.0)

    def test_too_short(self):
        assert np.isnan(yoy_change(np.full(12, 1.0))).all()

    def test_nonpositive_names_month(self):
        v = np.full(20, 100.0)
        v[5] = 0.0
        with pytest.raises(InputError, match="2000-06"):
            yoy_change(v, "percent_change", monthly("2000-01", 20))


def two_series_panel(n=100):
    rng = np.random.default_rng(1)
    return TimeSeriesPanel(
        monthly("2000-01", n),
        {"UR": 5 + rng.normal(size=n).cumsum() * 0.1, "INF": rng.normal(2, 1, n),
         "Z": rng.normal(size=n), "C": rng.normal(size=n)},
    )


class TestBuildDesign:
    def test_rows_lost_to_differencing(self):
        ds = build_design(two_series_panel(), DatasetSpec("UR", "INF", 12, (), ("Z",)))
        assert ds.n == 88
        assert ds.t_index[0] == np.datetime64("2000-01")
        np.testing.assert_array_equal(ds.X[:, -1], 1.0)

    def test_instrument_start_binds(self):
        panel = two_series_panel(200)
        z = panel["Z"].copy()
        z[: np.flatnonzero(panel.dates == np.datetime64("2005-06"))[0]] = np.nan
        panel = panel.with_series("Z", z)
        ds = build_design(panel, DatasetSpec("UR", "INF", 12, ("C",), ("Z",)))
        assert ds.t_index[0] == np.datetime64("2005-06")

    def test_sample_window(self):
        spec = DatasetSpec("UR", "INF", 12, ("C",), ("Z",), "2001-01", "2003-12")
        ds = build_design(two_series_panel(), spec)
        assert ds.t_index[0] == np.datetime64("2001-01")
        assert ds.t_index[-1] == np.datetime64("2003-12")
        assert ds.n == 36

    def test_layout_and_no_missing(self):
        ds = build_design(two_series_panel(), DatasetSpec("UR", "INF", 3, ("UR", "C"), ("Z",)))
        assert ds.x_names == ("UR", "C", "const")
        assert ds.p_x == 3 and ds.p_z == 1
        for arr in (ds.y, ds.d, ds.X, ds.Z):
            assert not np.isnan(arr).any()

    def test_empty_reports_availability(self):
        panel = two_series_panel()
        panel = panel.with_series("Z", np.full(100, np.nan))
        with pytest.raises(DesignError, match="Z: - to -"):
            build_design(panel, DatasetSpec("UR", "INF", 12, (), ("Z",)))

    def test_underdetermined(self):
        spec = DatasetSpec("UR", "INF", 12, ("C",), ("Z",), "2000-01", "2000-03")
        with pytest.raises(DesignError, match="underdetermined"):
            build_design(two_series_panel(), spec)

    def test_unknown_series(self):
        with pytest.raises(DesignError, match="NOPE"):
            build_design(two_series_panel(), DatasetSpec("UR", "NOPE", 12))

    def test_column_permutation_invariance(self, write_csv):
        rows = ["2000-%02d,%s,%s,%s" % (m, 5 + m / 10, (m * 7) % 5, (m * 3) % 7)
                for m in range(1, 13)]
        rows += ["2001-%02d,%s,%s,%s" % (m, 6 - m / 10, (m * 5) % 3, (m * 2) % 9)
                 for m in range(1, 13)]
        a = write_csv("date,UR,INF,Z\n" + "\n".join(rows) + "\n", "a.csv")
        b_rows = [",".join([r.split(",")[0], r.split(",")[3], r.split(",")[1], r.split(",")[2]])
                  for r in rows]
        b = write_csv("date,Z,UR,INF\n" + "\n".join(b_rows) + "\n", "b.csv")
        spec = DatasetSpec("UR", "INF", 3, ("UR",), ("Z",))
        da, db = build_design(load_csv(a), spec), build_design(load_csv(b), spec)
        for k in ("y", "d", "X", "Z"):
            np.testing.assert_array_equal(getattr(da, k), getattr(db, k))

    def test_dataset_requires_single_intercept(self):
        with pytest.raises(DesignError, match="intercept"):
            EstimationDataset(np.zeros(5), np.zeros(5), np.ones((5, 2)), np.zeros((5, 1)))


class TestSummarize:
    def test_simple(self):
        panel = TimeSeriesPanel(monthly("2000-01", 3), {"A": [2.0, 4.0, 6.0]})
        (row,) = summarize(panel)
        assert (row.mean, row.sd, row.min, row.max, row.obs) == (4.0, 2.0, 2.0, 6.0, 3)
        assert (row.first, row.last) == ("2000-01", "2000-03")

    def test_missing_skipped_and_empty_flagged(self):
        panel = TimeSeriesPanel(monthly("2000-01", 4),
                                {"A": [np.nan, 1.0, 3.0, np.nan], "B": [np.nan] * 4})
        a, b = summarize(panel)
        assert a.obs == 2 and a.first == "2000-02" and a.last == "2000-03"
        assert b.empty and not a.empty

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.one_of(st.none(), st.floats(-1e6, 1e6)), min_size=1, max_size=40))
    def test_min_mean_max_order(self, values):
        arr = np.array([np.nan if v is None else v for v in values])
        (row,) = summarize(TimeSeriesPanel(monthly("1990-01", arr.size), {"S": arr}))
        if not row.empty:
            assert row.min <= row.mean <= row.max
