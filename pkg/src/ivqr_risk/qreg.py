"""Linear quantile regression by exact check-loss minimization.

The solver walks between basic solutions (fits that interpolate exactly p
observations), choosing the steepest descending edge and moving along it to
the minimizing breakpoint.  Every iterate is recomputed from its basis, so
the returned coefficients are an exact vertex of the LP and the objective
matches a brute-force enumeration of basic solutions to rounding error.
A warm start from a previous basis makes sequences of closely related fits
(the inverse-QR grid search) cheap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, sparse, stats
from scipy.optimize import linprog

log = logging.getLogger(__name__)

__all__ = [
    "ParameterError",
    "RankError",
    "ConvergenceError",
    "SolverOptions",
    "QuantileFit",
    "check_loss",
    "fit_quantile",
    "hall_sheather",
    "kernel_bandwidth",
    "qreg_cov",
]


class ParameterError(ValueError):
    pass


class RankError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, trace: Sequence[float] = ()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class SolverOptions:
    """Convergence constants of the vertex-walk solver.

    ``optimality_tol`` is the relative tolerance on edge directional
    derivatives; ``zero_tol`` decides when a non-basic residual counts as
    zero (relative to the outcome scale).
    """

    max_iter: int = 5000
    optimality_tol: float = 1e-10
    zero_tol: float = 1e-11
    lex_max_iter: int = 200


DEFAULT_OPTIONS = SolverOptions()


def _validate_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"quantile level must lie in (0, 1), got {tau}")
    return tau


def check_loss(u, tau: float):
    """rho_tau(u) = u * (tau - 1{u < 0}); works on scalars and arrays."""
    tau = _validate_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


@dataclass
class QuantileFit:
    tau: float
    coefficients: np.ndarray
    residuals: np.ndarray
    objective: float
    iterations: int = 0
    converged: bool = True
    degenerate_ties: bool = False
    basis: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    covariance: Optional[np.ndarray] = None
    names: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.residuals.size

    @property
    def ses(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_record(self) -> dict:
        names = self.names or tuple(f"b{j}" for j in range(self.coefficients.size))
        ses = self.ses
        return {
            "tau": self.tau,
            "n": self.n,
            "objective": self.objective,
            "coefficients": {k: float(v) for k, v in zip(names, self.coefficients)},
            "ses": None if ses is None else {k: float(v) for k, v in zip(names, ses)},
            "solver": {
                "iterations": self.iterations,
                "converged": self.converged,
                "degenerate_ties": self.degenerate_ties,
            },
        }


def _dependent_columns(X: np.ndarray) -> list[int]:
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    return sorted(int(j) for j in piv[rank:])


def _check_design(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> None:
    n, p = X.shape
    if y.shape != (n,):
        raise ParameterError(f"y has shape {y.shape}, expected ({n},)")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ParameterError("X and y must be finite")
    if n <= p:
        raise RankError(f"need n > p, got n={n}, p={p}")
    dep = _dependent_columns(X)
    if dep:
        labels = [names[j] if j < len(names) else f"column {j}" for j in dep]
        raise RankError(f"design matrix is rank deficient; dependent columns: {labels}")


def _independent_rows(X: np.ndarray, order: np.ndarray, p: int) -> Optional[np.ndarray]:
    """First p rows in ``order`` that are linearly independent."""
    chosen: list[int] = []
    Q = np.zeros((p, 0))
    for i in order:
        v = X[i].astype(float)
        w = v - Q @ (Q.T @ v)
        nv = np.linalg.norm(v)
        if nv == 0 or np.linalg.norm(w) <= 1e-9 * nv:
            continue
        Q = np.column_stack([Q, w / np.linalg.norm(w)])
        chosen.append(int(i))
        if len(chosen) == p:
            return np.array(chosen)
    return None


def _initial_basis(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    b, *_ = np.linalg.lstsq(X, y, rcond=None)
    order = np.argsort(np.abs(y - X @ b), kind="stable")
    basis = _independent_rows(X, order, X.shape[1])
    if basis is None:
        raise RankError("cannot find p linearly independent observations")
    return basis


class _Walker:
    """State of one vertex walk on a fixed (X, y, tau)."""

    def __init__(self, X, y, tau, opts: SolverOptions):
        self.X, self.y, self.tau, self.opts = X, y, tau, opts
        self.n, self.p = X.shape
        self.ytol = opts.zero_tol * (1.0 + np.abs(y).max())

    def vertex(self, basis):
        Xh = self.X[basis]
        Binv = np.linalg.inv(Xh)
        b = Binv @ self.y[basis]
        r = self.y - self.X @ b
        r[basis] = 0.0
        return Binv, b, r

    def edges(self, basis, Binv, r):
        """Directional derivatives along the 2p edges leaving the vertex."""
        tau = self.tau
        nonbasic = np.ones(self.n, dtype=bool)
        nonbasic[basis] = False
        zero = nonbasic & (np.abs(r) <= self.ytol)
        psi = np.where(r < 0, tau - 1.0, tau)
        psi[~nonbasic] = 0.0
        psi[zero] = 0.0
        g = -(psi @ self.X) @ Binv
        d_plus = g + (1.0 - tau)
        d_minus = -g + tau
        if zero.any():
            A0 = self.X[zero] @ Binv
            d_plus += np.sum(check_loss(-A0, tau), axis=0)
            d_minus += np.sum(check_loss(A0, tau), axis=0)
        scale = self.opts.optimality_tol * (1.0 + np.abs(g))
        return d_plus, d_minus, scale, zero

    def line_search(self, basis, r, delta, slope0, zero):
        a = self.X @ delta
        cand = np.ones(self.n, dtype=bool)
        cand[basis] = False
        cand &= ~zero
        cand &= np.abs(a) > 0
        idx = np.flatnonzero(cand)
        t = r[idx] / a[idx]
        keep = t > 0
        idx, t = idx[keep], t[keep]
        if idx.size == 0:
            return None, 0.0
        order = np.argsort(t, kind="stable")
        cum = slope0 + np.cumsum(np.abs(a[idx[order]]))
        if cum[-1] < 0:
            return None, 0.0
        k = int(np.argmax(cum >= 0))
        return int(idx[order[k]]), float(t[order[k]])

    def walk(self, basis, trace):
        basis = np.array(basis, dtype=int)
        for it in range(self.opts.max_iter):
            Binv, b, r = self.vertex(basis)
            d_plus, d_minus, scale, zero = self.edges(basis, Binv, r)
            norms = np.linalg.norm(Binv, axis=0)
            rates = np.concatenate([d_plus / norms, d_minus / norms])
            tol = np.concatenate([scale, scale]) / np.concatenate([norms, norms])
            j2 = int(np.argmin(rates + tol))
            if rates[j2] >= -tol[j2]:
                return basis, b, r, it, zero
            j, sign = (j2, 1.0) if j2 < self.p else (j2 - self.p, -1.0)
            slope0 = d_plus[j] if sign > 0 else d_minus[j]
            delta = sign * Binv[:, j]
            enter, step = self.line_search(basis, r, delta, slope0, zero)
            if enter is None:
                raise ConvergenceError("descent edge without a breakpoint", trace)
            basis = basis.copy()
            basis[j] = enter
            trace.append(float(np.sum(check_loss(r, self.tau))))
        raise ConvergenceError(
            f"vertex walk did not converge in {self.opts.max_iter} iterations", trace
        )

    def certify(self, basis, r, zero) -> bool:
        """Exact subgradient optimality check, needed only at degenerate vertices."""
        if not zero.any():
            return True
        tau = self.tau
        support = np.concatenate([basis, np.flatnonzero(zero)])
        free = np.ones(self.n, dtype=bool)
        free[support] = False
        rhs = np.where(r[free] < 0, tau - 1.0, tau) @ self.X[free]
        res = linprog(
            np.zeros(support.size),
            A_eq=self.X[support].T,
            b_eq=-rhs,
            bounds=[(tau - 1.0, tau)] * support.size,
            method="highs",
        )
        return res.status == 0

    def lex_smallest(self, basis, b, r, zero):
        """Move along flat edges toward the lexicographically smallest optimal vertex."""
        ties = False
        for _ in range(self.opts.lex_max_iter):
            Binv, b, r = self.vertex(basis)
            d_plus, d_minus, scale, zero = self.edges(basis, Binv, r)
            flat = []
            for j in range(self.p):
                for sign, dd in ((1.0, d_plus[j]), (-1.0, d_minus[j])):
                    if abs(dd) <= scale[j] * 10:
                        ties = True
                        delta = sign * Binv[:, j]
                        nz = np.flatnonzero(np.abs(delta) > 1e-12 * np.abs(delta).max())
                        if nz.size and delta[nz[0]] < 0:
                            flat.append((j, sign, dd, delta))
            moved = False
            for j, sign, dd, delta in flat:
                enter, step = self.line_search(basis, r, delta, min(dd, 0.0), zero)
                if enter is None or step <= 0:
                    continue
                basis = basis.copy()
                basis[j] = enter
                moved = True
                break
            if not moved:
                return basis, b, r, ties
        return basis, b, r, ties


def _highs_solution(X: np.ndarray, y: np.ndarray, tau: float) -> np.ndarray:
    n, p = X.shape
    eye = sparse.identity(n, format="csr")
    A = sparse.hstack([sparse.csr_matrix(X), eye, -eye], format="csr")
    c = np.concatenate([np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)])
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs-ds")
    if res.status != 0:
        raise ConvergenceError(f"LP solver failed: {res.message}")
    return res.x[:p]


def fit_quantile(
    X,
    y,
    tau: float,
    *,
    start_basis: Optional[Sequence[int]] = None,
    names: Sequence[str] = (),
    options: SolverOptions = DEFAULT_OPTIONS,
    check: bool = True,
) -> QuantileFit:
    """Minimize sum(check_loss(y - X b, tau)) over b.

    Returns an exact basic solution. When the optimum is not unique the
    lexicographically smallest optimal vertex is returned and
    ``degenerate_ties`` is set.
    """
    tau = _validate_tau(tau)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if check:
        _check_design(X, y, names)

    walker = _Walker(X, y, tau, options)
    trace: list[float] = []
    basis = None
    if start_basis is not None:
        start = np.asarray(start_basis, dtype=int)
        if start.size == X.shape[1] and abs(np.linalg.det(X[start])) > 0:
            basis = start
    if basis is None:
        basis = _initial_basis(X, y)

    try:
        basis, b, r, iters, zero = walker.walk(basis, trace)
        ok = walker.certify(basis, r, zero)
    except (ConvergenceError, np.linalg.LinAlgError) as exc:
        log.debug("vertex walk failed (%s); restarting from LP solution", exc)
        ok, iters = False, len(trace)
    if not ok:
        b_lp = _highs_solution(X, y, tau)
        order = np.argsort(np.abs(y - X @ b_lp), kind="stable")
        basis = _independent_rows(X, order, X.shape[1])
        if basis is None:
            raise ConvergenceError("LP solution has no basic representation", trace)
        basis, b, r, more, zero = walker.walk(basis, trace)
        iters += more
        if not walker.certify(basis, r, zero):
            raise ConvergenceError("could not certify optimality", trace)

    basis, b, r, ties = walker.lex_smallest(basis, b, r, zero)
    r = y - X @ b
    return QuantileFit(
        tau=tau,
        coefficients=b,
        residuals=r,
        objective=float(np.sum(check_loss(r, tau))),
        iterations=iters,
        converged=True,
        degenerate_ties=ties,
        basis=basis,
        names=tuple(names),
    )


def hall_sheather(n: int, tau: float, alpha: float = 0.05) -> float:
    """Hall-Sheather bandwidth on the probability scale."""
    q = stats.norm.ppf(tau)
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    return n ** (-1.0 / 3.0) * z ** (2.0 / 3.0) * (
        1.5 * stats.norm.pdf(q) ** 2 / (2.0 * q * q + 1.0)
    ) ** (1.0 / 3.0)


def kernel_bandwidth(residuals: np.ndarray, tau: float, alpha: float = 0.05) -> float:
    """Residual-scale bandwidth: Hall-Sheather quantile spread times a robust scale."""
    r = np.asarray(residuals, dtype=float)
    n = r.size
    hs = hall_sheather(n, tau, alpha)
    lo, hi = max(tau - hs, 1e-4), min(tau + hs, 1.0 - 1e-4)
    sd = np.std(r, ddof=1)
    iqr = np.subtract(*np.percentile(r, [75, 25])) / 1.34
    kappa = min(sd, iqr) if iqr > 0 else sd
    h = kappa * (stats.norm.ppf(hi) - stats.norm.ppf(lo))
    if not h > 0:
        raise ParameterError("residuals have zero spread; bandwidth undefined")
    return float(h)


def qreg_cov(
    fit: QuantileFit,
    X,
    bandwidth: Optional[float] = None,
    method: str = "kernel_sandwich",
) -> np.ndarray:
    """Heteroskedasticity-robust covariance with a Gaussian-kernel density at zero.

    ``tau(1-tau) J^-1 (X'X/n) J^-1 / n`` with ``J = X' diag(K_h(r)) X / n``.
    """
    if method != "kernel_sandwich":
        raise ParameterError(f"unknown covariance method {method!r}")
    if not fit.converged:
        raise ParameterError("covariance requested for a non-converged fit")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if bandwidth is None:
        h = kernel_bandwidth(fit.residuals, fit.tau)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ParameterError(f"bandwidth must be positive, got {bandwidth}")
    n = X.shape[0]
    w = stats.norm.pdf(fit.residuals / h) / h
    J = (X * w[:, None]).T @ X / n
    S = fit.tau * (1.0 - fit.tau) * (X.T @ X) / n
    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        raise ParameterError("kernel-weighted design is singular") from None
    V = Jinv @ S @ Jinv.T / n
    return (V + V.T) / 2.0
