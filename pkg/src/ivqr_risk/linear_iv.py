"""Two-stage least squares and residual-distribution diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .data import EstimationDataset
from .qreg import RankError, _dependent_columns

__all__ = [
    "WeakInstrumentWarning",
    "FirstStage",
    "LinearIVFit",
    "bartlett_meat",
    "first_stage",
    "fit_2sls",
    "fit_ols",
    "residual_moments",
    "qq_data",
]


class WeakInstrumentWarning(UserWarning):
    pass


@dataclass
class FirstStage:
    fitted: np.ndarray
    coefficients: np.ndarray
    F_statistic: float
    names: tuple[str, ...] = ()


@dataclass
class LinearIVFit:
    alpha: float
    beta: np.ndarray
    residuals: np.ndarray
    covariance: np.ndarray
    first_stage: FirstStage
    names: tuple[str, ...] = ()
    cov_type: str = "robust"
    warnings: list[str] = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta])

    @property
    def ses(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_record(self) -> dict:
        return {
            "method": "2sls",
            "n": int(self.residuals.size),
            "cov_type": self.cov_type,
            "coefficients": dict(zip(self.names, map(float, self.params))),
            "ses": dict(zip(self.names, map(float, self.ses))),
            "first_stage_F": float(self.first_stage.F_statistic),
            "warnings": list(self.warnings),
        }


def _require_full_rank(M: np.ndarray, names) -> None:
    dep = _dependent_columns(M)
    if dep:
        raise RankError(
            "collinear columns: " + ", ".join(names[j] if j < len(names) else str(j) for j in dep)
        )


def bartlett_meat(scores: np.ndarray, lags: int) -> np.ndarray:
    """Newey-West long-run sum of outer products of the rows of ``scores``."""
    S = scores.T @ scores
    for lag in range(1, lags + 1):
        w = 1.0 - lag / (lags + 1.0)
        G = scores[lag:].T @ scores[:-lag]
        S += w * (G + G.T)
    return S


def first_stage(ds: EstimationDataset) -> FirstStage:
    """Least-squares projection of d on (X, Z) with the excluded-instrument F."""
    XZ = np.column_stack([ds.X, ds.Z])
    names = tuple(ds.x_names) + tuple(ds.z_names)
    _require_full_rank(XZ, names)
    coef, *_ = np.linalg.lstsq(XZ, ds.d, rcond=None)
    fitted = XZ @ coef
    rss_u = float(np.sum((ds.d - fitted) ** 2))
    q = ds.p_z
    if q == 0:
        F = 0.0
    else:
        cr, *_ = np.linalg.lstsq(ds.X, ds.d, rcond=None)
        rss_r = float(np.sum((ds.d - ds.X @ cr) ** 2))
        dof = ds.n - XZ.shape[1]
        if rss_u <= 1e-12 * max(rss_r, 1e-300):
            F = np.inf  # d lies in the instrument span
        else:
            F = max(((rss_r - rss_u) / q) / (rss_u / dof), 0.0)
    return FirstStage(fitted, coef, float(F), names)


def _sandwich(Xhat, resid, bread_inv, cov_type, lags):
    n, k = Xhat.shape
    scores = Xhat * resid[:, None]
    if cov_type == "robust":
        meat = scores.T @ scores * n / (n - k)
    elif cov_type == "hac":
        meat = bartlett_meat(scores, lags) * n / (n - k)
    else:
        raise ValueError(f"unknown covariance type {cov_type!r}")
    V = bread_inv @ meat @ bread_inv
    return (V + V.T) / 2.0


def fit_2sls(
    ds: EstimationDataset,
    cov_type: str = "robust",
    hac_lags: Optional[int] = None,
    weak_threshold: float = 10.0,
) -> LinearIVFit:
    """Classical 2SLS of y on (d, X) instrumenting d with Z.

    Covariance is HC1 by default; ``cov_type="hac"`` uses Bartlett weights
    with ``hac_lags`` lags (the caller usually passes horizon - 1).
    """
    if ds.p_z < 1:
        raise ValueError("2SLS needs at least one excluded instrument")
    fs = first_stage(ds)
    W = ds.regressors
    What = np.column_stack([fs.fitted, ds.X])
    _require_full_rank(What, ds.regressor_names)
    bread = What.T @ W
    theta = np.linalg.solve(bread, What.T @ ds.y)
    resid = ds.y - W @ theta
    bread_inv = np.linalg.inv(What.T @ What)
    V = _sandwich(What, resid, bread_inv, cov_type, hac_lags or 0)
    notes = []
    if fs.F_statistic < weak_threshold:
        msg = f"weak instruments: first-stage F = {fs.F_statistic:.2f} < {weak_threshold}"
        notes.append(msg)
        warnings.warn(msg, WeakInstrumentWarning, stacklevel=2)
    return LinearIVFit(
        alpha=float(theta[0]),
        beta=theta[1:],
        residuals=resid,
        covariance=V,
        first_stage=fs,
        names=ds.regressor_names,
        cov_type=cov_type,
        warnings=notes,
    )


def fit_ols(ds: EstimationDataset, cov_type: str = "robust", hac_lags: Optional[int] = None):
    """OLS of y on (d, X); returns (params, covariance, residuals)."""
    W = ds.regressors
    _require_full_rank(W, ds.regressor_names)
    theta, *_ = np.linalg.lstsq(W, ds.y, rcond=None)
    resid = ds.y - W @ theta
    V = _sandwich(W, resid, np.linalg.inv(W.T @ W), cov_type, hac_lags or 0)
    return theta, V, resid


def residual_moments(residuals) -> dict[str, float]:
    """Sample skewness and excess kurtosis (moment estimators, no bias correction)."""
    if isinstance(residuals, LinearIVFit):
        residuals = residuals.residuals
    e = np.asarray(residuals, dtype=float)
    if e.size < 4:
        raise ValueError("need at least 4 residuals")
    c = e - e.mean()
    m2 = np.mean(c**2)
    if m2 <= 0:
        raise ValueError("residual variance is zero")
    return {
        "n": int(e.size),
        "skewness": float(np.mean(c**3) / m2**1.5),
        "excess_kurtosis": float(np.mean(c**4) / m2**2 - 3.0),
    }


def qq_data(residuals) -> np.ndarray:
    """Normal QQ pairs: column 0 is Phi^-1((i - 0.5)/n), column 1 the sorted
    standardized residuals."""
    if isinstance(residuals, LinearIVFit):
        residuals = residuals.residuals
    e = np.asarray(residuals, dtype=float)
    n = e.size
    if n < 3:
        raise ValueError("need at least 3 residuals")
    theo = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    sd = e.std(ddof=1)
    z = (np.sort(e) - e.mean()) / sd if sd > 0 else np.zeros(n)
    return np.column_stack([theo, z])
