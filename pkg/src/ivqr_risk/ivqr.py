"""Instrumental-variable quantile regression for one endogenous regressor.

Two estimators are provided:

* inverse quantile regression: for each candidate ``alpha`` on a grid, run
  QR of ``y - d*alpha`` on ``(d_hat, X)`` and keep the candidate whose
  ``d_hat`` coefficient has the smallest Wald statistic;
* smoothed GMM: solve the just-identified moment system
  ``mean[(I~(e/h) - tau) * (d_hat, X)] = 0`` with the piecewise-linear
  smoothed indicator ``I~``.

``fit_ivqr_auto`` runs the grid estimator and switches to the smoothed one
when the grid search breaks down.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .data import EstimationDataset
from .linear_iv import bartlett_meat, first_stage, fit_2sls
from .qreg import (
    ConvergenceError,
    ParameterError,
    QuantileFit,
    fit_quantile,
    kernel_bandwidth,
    qreg_cov,
)

log = logging.getLogger(__name__)

__all__ = [
    "IVQRError",
    "GridBoundaryError",
    "GridInstabilityError",
    "SmoothedConvergenceError",
    "AlphaGrid",
    "SmoothingBandwidth",
    "IVQROptions",
    "IVQRFit",
    "smoothed_indicator",
    "first_stage_fit",
    "wald_objective",
    "default_grid",
    "fit_ivqr_grid",
    "fit_ivqr_smoothed",
    "fit_ivqr_auto",
    "ivqr_se",
    "plug_in_bandwidth",
]


class IVQRError(RuntimeError):
    pass


class GridBoundaryError(IVQRError):
    def __init__(self, message, profile=None):
        super().__init__(message)
        self.profile = profile


class GridInstabilityError(IVQRError):
    def __init__(self, message, profile=None):
        super().__init__(message)
        self.profile = profile


class SmoothedConvergenceError(IVQRError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class AlphaGrid:
    lower: float
    upper: float
    step: float
    refinement_rounds: int = 2

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)) or self.lower >= self.upper:
            raise ParameterError(f"grid needs lower < upper, got [{self.lower}, {self.upper}]")
        if not self.step > 0:
            raise ParameterError(f"grid step must be positive, got {self.step}")
        if (self.upper - self.lower) / self.step > 1e6:
            raise ParameterError("grid has more than 10^6 points")
        if self.refinement_rounds < 0:
            raise ParameterError("refinement_rounds must be >= 0")

    def points(self) -> np.ndarray:
        k = int(np.floor((self.upper - self.lower) / self.step + 1e-9))
        pts = self.lower + self.step * np.arange(k + 1)
        if self.upper - pts[-1] > 1e-9 * self.step:
            pts = np.append(pts, self.upper)
        return pts

    @property
    def final_step(self) -> float:
        return self.step / 10.0**self.refinement_rounds


@dataclass(frozen=True)
class SmoothingBandwidth:
    value: float
    rule: str = "fixed"

    def __post_init__(self):
        if not self.value > 0:
            raise ParameterError(f"bandwidth must be positive, got {self.value}")
        if self.rule not in ("plug_in", "fixed"):
            raise ParameterError(f"unknown bandwidth rule {self.rule!r}")


@dataclass(frozen=True)
class IVQROptions:
    """Estimator settings shared by the grid, smoothed and auto fits."""

    grid: Optional[AlphaGrid] = None
    grid_points: int = 201
    grid_span_ses: float = 10.0
    refinement_rounds: int = 2
    smoothing_bandwidth: Optional[float] = None
    plug_in_constant: float = 1.0
    cov_type: str = "robust"
    hac_lags: int = 0
    density_bandwidth: Optional[float] = None
    max_newton_iter: int = 200
    restarts: int = 5
    max_grid_failure_rate: float = 0.2


DEFAULT_IVQR_OPTIONS = IVQROptions()


@dataclass
class IVQRFit:
    tau: float
    alpha: float
    beta: np.ndarray
    covariance: np.ndarray
    method: str
    n: int
    residuals: np.ndarray
    wald_at_min: float = np.nan
    wald_alphas: np.ndarray = field(default_factory=lambda: np.empty(0))
    wald_profile: np.ndarray = field(default_factory=lambda: np.empty(0))
    grid: Optional[AlphaGrid] = None
    bandwidth: Optional[SmoothingBandwidth] = None
    fallback_triggered: bool = False
    fallback_reason: str = ""
    converged: bool = True
    iterations: int = 0
    names: tuple[str, ...] = ()

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta])

    @property
    def coefficients(self) -> np.ndarray:
        return self.params

    @property
    def ses(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_record(self, include_profile: bool = False) -> dict:
        names = self.names or tuple(f"b{j}" for j in range(self.params.size))
        rec = {
            "tau": self.tau,
            "n": self.n,
            "method": self.method,
            "coefficients": dict(zip(names, map(float, self.params))),
            "ses": dict(zip(names, map(float, self.ses))),
            "wald_at_min": None if np.isnan(self.wald_at_min) else float(self.wald_at_min),
            "fallback_triggered": self.fallback_triggered,
            "fallback_reason": self.fallback_reason,
        }
        if self.grid is not None:
            rec["grid"] = {
                "lower": self.grid.lower,
                "upper": self.grid.upper,
                "step": self.grid.step,
                "refinement_rounds": self.grid.refinement_rounds,
            }
        if self.bandwidth is not None:
            rec["bandwidth"] = {"value": self.bandwidth.value, "rule": self.bandwidth.rule}
        if include_profile and self.wald_alphas.size:
            rec["wald_profile"] = [
                [float(a), float(w)] for a, w in zip(self.wald_alphas, self.wald_profile)
            ]
        return rec


def smoothed_indicator(v):
    """Piecewise-linear smoothing of 1{v <= 0}: 1 below -1, 0 above 1, linear between."""
    v = np.asarray(v, dtype=float)
    out = np.clip((1.0 - v) / 2.0, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def first_stage_fit(ds: EstimationDataset):
    """Fitted endogenous values and coefficients from regressing d on (X, Z)."""
    fs = first_stage(ds)
    return fs.fitted, fs.coefficients


def _inner_design(ds: EstimationDataset, dhat: np.ndarray) -> np.ndarray:
    return np.column_stack([dhat, ds.X])


def _wald_eval(alpha, ds, tau, dhat, R, start_basis=None, density_bandwidth=None):
    fit = fit_quantile(R, ds.y - ds.d * alpha, tau, start_basis=start_basis, check=False)
    V = qreg_cov(fit, R, bandwidth=density_bandwidth)
    gamma = fit.coefficients[0]
    var = V[0, 0]
    if not var > 0:
        return np.inf, fit
    return float(gamma * gamma / var), fit


def wald_objective(
    alpha_candidate: float,
    ds: EstimationDataset,
    tau: float,
    dhat: np.ndarray,
    density_bandwidth: Optional[float] = None,
) -> float:
    """Wald statistic for the d_hat coefficient in QR of ``y - d*alpha`` on (d_hat, X)."""
    R = _inner_design(ds, dhat)
    try:
        value, _ = _wald_eval(alpha_candidate, ds, tau, dhat, R,
                              density_bandwidth=density_bandwidth)
    except (ConvergenceError, ParameterError, np.linalg.LinAlgError) as exc:
        raise IVQRError(f"inner QR failed at alpha={alpha_candidate}: {exc}") from exc
    return value


def default_grid(
    ds: EstimationDataset,
    points: int = 201,
    span_ses: float = 10.0,
    refinement_rounds: int = 2,
) -> AlphaGrid:
    """Grid centred on the 2SLS estimate spanning +/- ``span_ses`` robust SEs."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tsls = fit_2sls(ds)
    center, se = tsls.alpha, tsls.ses[0]
    if not (np.isfinite(se) and se > 0):
        se = max(abs(center), 1.0)
    lower, upper = center - span_ses * se, center + span_ses * se
    return AlphaGrid(lower, upper, (upper - lower) / (points - 1), refinement_rounds)


def _argmin_smallest(alphas, values):
    order = np.lexsort((alphas, values))
    return int(order[0])


def fit_ivqr_grid(
    ds: EstimationDataset,
    tau: float,
    grid: Optional[AlphaGrid] = None,
    options: IVQROptions = DEFAULT_IVQR_OPTIONS,
) -> IVQRFit:
    """Inverse quantile regression by grid search with local refinement."""
    if ds.p_z < 1:
        raise ParameterError("IVQR needs at least one instrument")
    grid = grid or options.grid or default_grid(
        ds, options.grid_points, options.grid_span_ses, options.refinement_rounds
    )
    dhat, _ = first_stage_fit(ds)
    R = _inner_design(ds, dhat)

    evaluated: dict[float, float] = {}
    state = {"basis": None, "failures": 0}

    def evaluate(points):
        for a in points:
            a = float(a)
            if a in evaluated:
                continue
            try:
                w, fit = _wald_eval(a, ds, tau, dhat, R, state["basis"],
                                    options.density_bandwidth)
                state["basis"] = fit.basis
            except (ConvergenceError, ParameterError, np.linalg.LinAlgError) as exc:
                log.debug("inner QR failed at alpha=%g: %s", a, exc)
                state["failures"] += 1
                w = np.nan
            evaluated[a] = w

    def profile():
        alphas = np.array(sorted(evaluated))
        return alphas, np.array([evaluated[a] for a in alphas])

    coarse = grid.points()
    evaluate(coarse)
    if state["failures"] > options.max_grid_failure_rate * coarse.size:
        raise GridInstabilityError(
            f"inner QR failed at {state['failures']} of {coarse.size} grid points", profile()
        )
    vals = np.array([evaluated[float(a)] for a in coarse])
    finite = np.where(np.isfinite(vals), vals, np.inf)
    k = _argmin_smallest(coarse, finite)
    if not np.isfinite(finite[k]):
        raise GridInstabilityError("no finite Wald value on the grid", profile())
    if k in (0, coarse.size - 1):
        raise GridBoundaryError(
            f"Wald minimum at grid boundary alpha={coarse[k]:.6g}", profile()
        )

    incumbent, step = float(coarse[k]), grid.step
    for _ in range(grid.refinement_rounds):
        step /= 10.0
        local = incumbent + step * np.arange(-10, 11)
        local = local[(local >= grid.lower) & (local <= grid.upper)]
        evaluate(local)
        alphas, values = profile()
        finite = np.where(np.isfinite(values), values, np.inf)
        incumbent = float(alphas[_argmin_smallest(alphas, finite)])

    alphas, values = profile()
    if not np.isfinite(evaluated[incumbent]):
        raise GridInstabilityError(f"non-finite Wald value at alpha={incumbent}", (alphas, values))
    if incumbent <= grid.lower or incumbent >= grid.upper:
        raise GridBoundaryError(f"refined minimum at grid boundary alpha={incumbent:.6g}",
                                (alphas, values))

    inner = fit_quantile(R, ds.y - ds.d * incumbent, tau, start_basis=state["basis"], check=False)
    beta = inner.coefficients[1:]
    fit = IVQRFit(
        tau=tau,
        alpha=incumbent,
        beta=beta,
        covariance=np.full((ds.p_x + 1, ds.p_x + 1), np.nan),
        method="grid",
        n=ds.n,
        residuals=ds.y - ds.d * incumbent - ds.X @ beta,
        wald_at_min=float(np.nanmin(values)),
        wald_alphas=alphas,
        wald_profile=values,
        grid=grid,
        iterations=len(evaluated),
        names=ds.regressor_names,
    )
    fit.covariance = ivqr_se(fit, ds, dhat=dhat, options=options)[1]
    return fit


def plug_in_bandwidth(residuals: np.ndarray, constant: float = 1.0) -> SmoothingBandwidth:
    """Gaussian-reference rule ``constant * scale * n^(-1/3)``, scale = min(SD, IQR/1.349)."""
    r = np.asarray(residuals, dtype=float)
    sd = np.std(r, ddof=1)
    iqr = np.subtract(*np.percentile(r, [75, 25])) / 1.349
    scale = min(sd, iqr) if iqr > 0 else sd
    if not scale > 0:
        raise ParameterError("residual scale is zero; cannot form plug-in bandwidth")
    return SmoothingBandwidth(float(constant * scale * r.size ** (-1.0 / 3.0)), "plug_in")


def _smoothed_moments(theta, ds, Psi, W, tau, h):
    e = ds.y - W @ theta
    g = smoothed_indicator(e / h) - tau
    m = Psi.T @ g / ds.n
    inside = (np.abs(e) < h).astype(float)
    G = (Psi * inside[:, None]).T @ W / (2.0 * h * ds.n)
    return m, G


def _newton(theta0, ds, Psi, W, tau, h, max_iter, tol):
    theta = np.array(theta0, dtype=float)
    m, G = _smoothed_moments(theta, ds, Psi, W, tau, h)
    norm = np.linalg.norm(m)
    for it in range(1, max_iter + 1):
        if np.all(np.abs(m) <= tol):
            return theta, True, it - 1
        try:
            step = np.linalg.solve(G, m)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(G, m, rcond=None)
        lam = 1.0
        while True:
            cand = theta - lam * step
            m_new, G_new = _smoothed_moments(cand, ds, Psi, W, tau, h)
            n_new = np.linalg.norm(m_new)
            if n_new < norm or lam < 1e-6:
                break
            lam /= 2.0
        if not np.all(np.isfinite(cand)):
            return theta, False, it
        theta, m, G, norm = cand, m_new, G_new, n_new
    return theta, bool(np.all(np.abs(m) <= tol)), max_iter


def fit_ivqr_smoothed(
    ds: EstimationDataset,
    tau: float,
    bandwidth: Optional[SmoothingBandwidth | float] = None,
    start: Optional[Sequence[float]] = None,
    options: IVQROptions = DEFAULT_IVQR_OPTIONS,
) -> IVQRFit:
    """Smoothed-indicator GMM estimate with instruments (d_hat, X)."""
    if ds.p_z < 1:
        raise ParameterError("IVQR needs at least one instrument")
    dhat, _ = first_stage_fit(ds)
    Psi = _inner_design(ds, dhat)
    W = ds.regressors
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tsls = fit_2sls(ds)
    starts = []
    if start is not None:
        starts.append(np.asarray(start, dtype=float))
    starts.append(tsls.params)
    qr = fit_quantile(W, ds.y, tau, check=False)
    starts.append(qr.coefficients)

    if bandwidth is None:
        bandwidth = options.smoothing_bandwidth
    if bandwidth is None:
        bw = plug_in_bandwidth(tsls.residuals, options.plug_in_constant)
    elif isinstance(bandwidth, SmoothingBandwidth):
        bw = bandwidth
    else:
        bw = SmoothingBandwidth(float(bandwidth), "fixed")
    h = bw.value

    tol = 1e-9 * (1.0 + np.mean(np.abs(Psi), axis=0))
    rng = np.random.default_rng(0)
    spread = np.maximum(np.abs(tsls.ses), 1e-3)
    last = starts[0]
    total = 0
    for attempt in range(options.restarts + 1):
        if attempt < len(starts):
            theta0 = starts[attempt]
        else:
            theta0 = starts[0] + rng.normal(size=starts[0].size) * spread
        theta, ok, iters = _newton(theta0, ds, Psi, W, tau, h, options.max_newton_iter, tol)
        total += iters
        last = theta
        if ok:
            break
    else:
        raise SmoothedConvergenceError(
            f"smoothed GMM did not converge after {options.restarts} restarts", last
        )
    fit = IVQRFit(
        tau=tau,
        alpha=float(theta[0]),
        beta=theta[1:],
        covariance=np.full((theta.size, theta.size), np.nan),
        method="smoothed",
        n=ds.n,
        residuals=ds.y - W @ theta,
        bandwidth=bw,
        iterations=total,
        names=ds.regressor_names,
    )
    fit.covariance = ivqr_se(fit, ds, dhat=dhat, options=options)[1]
    return fit


def fit_ivqr_auto(
    ds: EstimationDataset,
    tau: float,
    options: IVQROptions = DEFAULT_IVQR_OPTIONS,
) -> IVQRFit:
    """Grid estimator first; smoothed GMM when the grid search breaks down."""
    try:
        return fit_ivqr_grid(ds, tau, options=options)
    except IVQRError as exc:
        reason = f"{type(exc).__name__}: {exc}"
    try:
        fit = fit_ivqr_smoothed(ds, tau, options=options)
    except (IVQRError, ParameterError, np.linalg.LinAlgError) as exc:
        raise IVQRError(f"grid failed ({reason}); smoothed failed ({exc})") from exc
    fit.fallback_triggered = True
    fit.fallback_reason = reason
    return fit


def ivqr_se(
    fit: IVQRFit,
    ds: EstimationDataset,
    dhat: Optional[np.ndarray] = None,
    options: IVQROptions = DEFAULT_IVQR_OPTIONS,
):
    """Kernel sandwich ``J^-1 S J^-T / n`` for (alpha, beta).

    ``J = mean[K_h(e) Psi W']`` with instruments ``Psi = (d_hat, X)`` and
    regressors ``W = (d, X)``. Returns (ses, covariance).
    """
    if not fit.converged:
        raise ParameterError("standard errors requested for a non-converged fit")
    if dhat is None:
        dhat, _ = first_stage_fit(ds)
    Psi = _inner_design(ds, dhat)
    W = ds.regressors
    e = ds.y - W @ fit.params
    tau = fit.tau
    h = options.density_bandwidth or kernel_bandwidth(e, tau)
    n = ds.n
    k = stats.norm.pdf(e / h) / h
    J = (Psi * k[:, None]).T @ W / n
    if options.cov_type == "hac":
        scores = Psi * (tau - (e < 0))[:, None]
        S = bartlett_meat(scores, options.hac_lags) / n
    elif options.cov_type == "robust":
        S = tau * (1.0 - tau) * Psi.T @ Psi / n
    else:
        raise ParameterError(f"unknown covariance type {options.cov_type!r}")
    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        raise IVQRError("singular Jacobian in IVQR sandwich") from None
    if not np.all(np.isfinite(Jinv)) or np.linalg.cond(J) > 1e14:
        raise IVQRError("singular Jacobian in IVQR sandwich")
    V = Jinv @ S @ Jinv.T / n
    V = (V + V.T) / 2.0
    return np.sqrt(np.clip(np.diag(V), 0.0, None)), V
