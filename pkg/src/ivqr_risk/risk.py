"""Quantile grids, predictive densities, tail-risk reports and group contrasts."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data import EstimationDataset
from .ivqr import IVQRFit, IVQROptions, fit_ivqr_auto, fit_ivqr_grid, fit_ivqr_smoothed
from .qreg import QuantileFit, fit_quantile, qreg_cov

log = logging.getLogger(__name__)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

DEFAULT_TAUS = tuple(round(0.10 + 0.05 * k, 2) for k in range(17))
DEFAULT_TAIL_TAUS = (0.02, 0.98)
ESTIMATORS = ("qr", "ivqr_grid", "ivqr_smoothed", "auto")

Fit = Union[QuantileFit, IVQRFit]


class GridFitError(RuntimeError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or {}


class TailRiskError(KeyError):
    pass


class ContrastError(ValueError):
    pass


def fit_single(
    ds: EstimationDataset,
    tau: float,
    estimator: str = "qr",
    options: IVQROptions = IVQROptions(),
) -> Fit:
    """One fit reporting coefficients in the (d, X) layout with covariance."""
    if estimator == "qr":
        W = ds.regressors
        fit = fit_quantile(W, ds.y, tau, names=ds.regressor_names)
        fit.covariance = qreg_cov(fit, W, bandwidth=options.density_bandwidth)
        return fit
    if estimator == "ivqr_grid":
        return fit_ivqr_grid(ds, tau, options=options)
    if estimator == "ivqr_smoothed":
        return fit_ivqr_smoothed(ds, tau, options=options)
    if estimator == "auto":
        return fit_ivqr_auto(ds, tau, options=options)
    raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")


@dataclass
class QuantileGridFit:
    taus: tuple[float, ...]
    fits: dict[float, Fit]
    estimator: str
    dataset_id: str = ""
    names: tuple[str, ...] = ()
    failures: dict[float, str] = field(default_factory=dict)

    @property
    def fitted_taus(self) -> tuple[float, ...]:
        return tuple(t for t in self.taus if t in self.fits)

    def fit_at(self, tau: float) -> Fit:
        for t, fit in self.fits.items():
            if abs(t - tau) < 1e-9:
                return fit
        raise TailRiskError(f"no fit at tau={tau} (fitted: {self.fitted_taus})")

    def coefficient_table(self) -> list[dict]:
        rows = []
        for tau in self.fitted_taus:
            fit = self.fits[tau]
            ses = fit.ses
            for j, name in enumerate(self.names):
                rows.append({
                    "tau": tau,
                    "term": name,
                    "coefficient": float(fit.coefficients[j]),
                    "se": float(ses[j]) if ses is not None else math.nan,
                    "method": getattr(fit, "method", "qr"),
                })
        return rows


def fit_quantile_grid(
    ds: EstimationDataset,
    taus: Sequence[float] = DEFAULT_TAUS,
    estimator: str = "qr",
    options: IVQROptions = IVQROptions(),
    min_success: float = 0.8,
) -> QuantileGridFit:
    """Fit every tau; individual failures are recorded unless more than 20% fail."""
    taus = tuple(float(t) for t in taus)
    if any(not 0 < t < 1 for t in taus):
        raise ValueError(f"every tau must lie in (0, 1): {taus}")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("taus must be strictly increasing")
    fits, failures = {}, {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for tau in taus:
            try:
                fits[tau] = fit_single(ds, tau, estimator, options)
            except Exception as exc:  # per-tau failure is data, not fatal
                failures[tau] = f"{type(exc).__name__}: {exc}"
                log.info("tau=%g failed: %s", tau, failures[tau])
    if len(fits) < min_success * len(taus):
        raise GridFitError(
            f"{len(failures)} of {len(taus)} quantile fits failed", failures
        )
    return QuantileGridFit(taus, fits, estimator, ds.label, ds.regressor_names, failures)


def rearrange(values: Sequence[float]) -> np.ndarray:
    """Monotone rearrangement: the fitted values sorted ascending, to be paired
    with ascending taus."""
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("rearrange needs finite values")
    return np.sort(v, kind="stable")


@dataclass
class PredictiveDensity:
    """Piecewise-constant density implied by a piecewise-linear quantile function.

    ``support``/``density`` repeat each interior knot so that the step
    function integrates exactly under the trapezoid rule.
    """

    support: np.ndarray
    density: np.ndarray
    taus: np.ndarray
    quantiles: np.ndarray
    knot_taus: np.ndarray
    knot_values: np.ndarray
    conditioning: dict
    level: Optional[float] = None

    @property
    def level_support(self) -> Optional[np.ndarray]:
        return None if self.level is None else self.support + self.level

    def integral(self) -> float:
        return float(_trapezoid(self.density, self.support))

    def pdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        k = np.searchsorted(self.knot_values, y, side="right") - 1
        seg = np.diff(self.knot_taus) / np.diff(self.knot_values)
        seg = seg / (self.knot_taus[-1] - self.knot_taus[0])
        inside = (k >= 0) & (k < seg.size)
        out = np.zeros_like(y)
        out[inside] = seg[k[inside]]
        return out

    def quantile(self, taus) -> np.ndarray:
        """Invert the CDF recovered by integrating the density."""
        cdf = np.concatenate([[0.0], np.cumsum(
            0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.support))])
        cdf /= cdf[-1]
        lo, hi = self.knot_taus[0], self.knot_taus[-1]
        target = (np.asarray(taus, dtype=float) - lo) / (hi - lo)
        return np.interp(target, cdf, self.support)


def predict_quantiles(gridfit: QuantileGridFit, conditioning) -> tuple[np.ndarray, np.ndarray]:
    """Per-tau predictions w'theta(tau) at a regressor vector in (d, X) layout."""
    names = gridfit.names
    if isinstance(conditioning, dict):
        missing = [nm for nm in names if nm not in conditioning and nm != "const"]
        if missing:
            raise ValueError(f"conditioning values missing for {missing}")
        w = np.array([1.0 if nm == "const" and nm not in conditioning else conditioning[nm]
                      for nm in names], dtype=float)
    else:
        w = np.asarray(conditioning, dtype=float).ravel()
        if w.size != len(names):
            raise ValueError(f"conditioning vector has {w.size} entries, expected {len(names)}")
    taus = np.array(gridfit.fitted_taus)
    preds = np.array([gridfit.fits[t].coefficients @ w for t in taus])
    return taus, preds


def predictive_density(
    gridfit: QuantileGridFit,
    conditioning,
    tails: tuple[float, float] = DEFAULT_TAIL_TAUS,
    level: Optional[float] = None,
) -> PredictiveDensity:
    """Density of the outcome change at a conditioning point.

    Predictions are rearranged, extended linearly to the ``tails`` taus using
    the outermost segment slopes, and differentiated as a piecewise-linear
    quantile function.  ``level`` (current rate) shifts the support to levels.
    """
    taus, preds = predict_quantiles(gridfit, conditioning)
    if taus.size < 4:
        raise GridFitError(f"need at least 4 fitted taus, have {taus.size}")
    q = rearrange(preds)
    lo, hi = tails
    if not (0 < lo <= taus[0] and taus[-1] <= hi < 1):
        raise ValueError(f"tail taus {tails} must bracket the grid {taus[0]}..{taus[-1]}")

    # ties (or near-ties, which overflow the slope) would put a point mass in
    # the density; separate them minimally
    scale = max(1.0, float(np.abs(q).max()))
    gap = 1e-9 * scale
    for k in range(1, q.size):
        if q[k] - q[k - 1] < gap:
            q[k] = q[k - 1] + gap

    knot_t, knot_q = list(taus), list(q)
    if lo < taus[0]:
        slope = (q[1] - q[0]) / (taus[1] - taus[0])
        knot_t.insert(0, lo)
        knot_q.insert(0, q[0] - slope * (taus[0] - lo))
    if hi > taus[-1]:
        slope = (q[-1] - q[-2]) / (taus[-1] - taus[-2])
        knot_t.append(hi)
        knot_q.append(q[-1] + slope * (hi - taus[-1]))
    knot_t, knot_q = np.array(knot_t), np.array(knot_q)

    seg = np.diff(knot_t) / np.diff(knot_q)
    seg /= knot_t[-1] - knot_t[0]
    support = np.repeat(knot_q, 2)[1:-1]
    density = np.repeat(seg, 2)
    # trapezoid normalization removes the last rounding error
    density = density / _trapezoid(density, support)
    cond = conditioning if isinstance(conditioning, dict) else dict(zip(gridfit.names, map(float, conditioning)))
    return PredictiveDensity(
        support=support,
        density=density,
        taus=taus,
        quantiles=q,
        knot_taus=knot_t,
        knot_values=knot_q,
        conditioning=cond,
        level=level,
    )


@dataclass
class TailRiskReport:
    group: str
    horizon_months: int
    tau: float
    inflation_coefficient: float
    inflation_se: float
    instrument: str
    method: str
    names: tuple[str, ...]
    coefficients: np.ndarray
    ses: np.ndarray
    n: int = 0
    category: str = ""

    @property
    def z_score(self) -> float:
        return self.inflation_coefficient / self.inflation_se

    def to_rows(self) -> list[dict]:
        return [
            {
                "group": self.group, "category": self.category,
                "horizon_months": self.horizon_months, "tau": self.tau,
                "instrument": self.instrument, "method": self.method, "n": self.n,
                "term": name, "coefficient": float(c), "se": float(s),
            }
            for name, c, s in zip(self.names, self.coefficients, self.ses)
        ]


def tail_risk(
    fit: Union[QuantileGridFit, Fit],
    tau: float = 0.80,
    group: str = "",
    horizon_months: int = 0,
    instrument: str = "",
    category: str = "",
) -> TailRiskReport:
    """Endogenous-regressor coefficient (first in the layout) and all controls at tau."""
    if isinstance(fit, QuantileGridFit):
        names = fit.names
        fit = fit.fit_at(tau)
    else:
        if abs(fit.tau - tau) > 1e-9:
            raise TailRiskError(f"fit is at tau={fit.tau}, requested {tau}")
        names = fit.names
    ses = fit.ses
    if ses is None or not np.all(ses > 0):
        raise ValueError("tail-risk report needs positive standard errors")
    coef = np.asarray(fit.coefficients, dtype=float)
    return TailRiskReport(
        group=group,
        horizon_months=horizon_months,
        tau=tau,
        inflation_coefficient=float(coef[0]),
        inflation_se=float(ses[0]),
        instrument=instrument,
        method=getattr(fit, "method", "qr"),
        names=tuple(names),
        coefficients=coef,
        ses=np.asarray(ses, dtype=float),
        n=int(fit.n),
        category=category,
    )


@dataclass
class GroupContrast:
    group_a: str
    group_b: str
    coefficient_gap: float
    gap_se: float
    z_score: float
    covariance_mode: str = "independent"
    tau: float = 0.8
    horizon_months: int = 0
    instrument: str = ""


def group_contrast(
    a: TailRiskReport,
    b: TailRiskReport,
    covariance_mode: str = "independent",
    gap_se: Optional[float] = None,
) -> GroupContrast:
    """Gap in inflation coefficients between two groups.

    ``independent`` combines the two SEs in quadrature; ``block_bootstrap``
    takes ``gap_se`` from :func:`block_bootstrap_gap_se`.
    """
    if a.instrument != b.instrument or abs(a.tau - b.tau) > 1e-12 or a.horizon_months != b.horizon_months:
        raise ContrastError(
            f"reports differ in configuration: ({a.instrument}, {a.tau}, {a.horizon_months}) vs "
            f"({b.instrument}, {b.tau}, {b.horizon_months})"
        )
    gap = a.inflation_coefficient - b.inflation_coefficient
    if covariance_mode == "independent":
        se = math.hypot(a.inflation_se, b.inflation_se)
    elif covariance_mode == "block_bootstrap":
        if gap_se is None:
            raise ContrastError("block_bootstrap mode needs a bootstrap gap_se")
        se = float(gap_se)
    else:
        raise ContrastError(f"unknown covariance mode {covariance_mode!r}")
    z = gap / se if se > 0 else (0.0 if gap == 0 else math.copysign(math.inf, gap))
    return GroupContrast(a.group, b.group, gap, se, z, covariance_mode, a.tau,
                         a.horizon_months, a.instrument)


def _subset(ds: EstimationDataset, rows: np.ndarray) -> EstimationDataset:
    return EstimationDataset(ds.y[rows], ds.d[rows], ds.X[rows], ds.Z[rows], ds.t_index[rows],
                             ds.x_names, ds.z_names, ds.d_name, ds.label)


def block_bootstrap_gap_se(
    ds_a: EstimationDataset,
    ds_b: EstimationDataset,
    tau: float,
    estimator: str = "qr",
    block_length: int = 12,
    reps: int = 200,
    seed: int = 0,
    options: IVQROptions = IVQROptions(),
) -> float:
    """SE of the coefficient gap by resampling the same moving blocks of months
    for both groups, which keeps their cross-correlation."""
    common = np.intersect1d(ds_a.t_index, ds_b.t_index)
    if common.size < 2 * block_length:
        raise ContrastError("too few common months for a block bootstrap")
    ia = np.searchsorted(ds_a.t_index, common)
    ib = np.searchsorted(ds_b.t_index, common)
    n = common.size
    L = max(1, int(block_length))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
    nblocks = int(np.ceil(n / L))
    gaps = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(reps):
            starts = rng.integers(0, n - L + 1, size=nblocks)
            idx = (starts[:, None] + np.arange(L)).ravel()[:n]
            try:
                fa = fit_single(_subset(ds_a, ia[idx]), tau, estimator, options)
                fb = fit_single(_subset(ds_b, ib[idx]), tau, estimator, options)
            except Exception as exc:
                log.debug("bootstrap replicate failed: %s", exc)
                continue
            gaps.append(fa.coefficients[0] - fb.coefficients[0])
    if len(gaps) < 0.8 * reps:
        raise ContrastError(f"only {len(gaps)} of {reps} bootstrap replicates succeeded")
    return float(np.std(gaps, ddof=1))


def fitted_quantile_series(fit: Fit, ds: EstimationDataset) -> np.ndarray:
    """In-sample fitted tau-quantile of the outcome change at every row."""
    return ds.regressors @ np.asarray(fit.coefficients, dtype=float)
