"""Independent reference computations used by the test suite."""

from itertools import combinations

import numpy as np


def check_loss(u, tau):
    u = np.asarray(u, dtype=float)
    return np.where(u >= 0, tau * u, (tau - 1) * u)


def brute_force_qr(X, y, tau):
    """Minimum check-loss objective over every basic solution (p-row interpolant)."""
    n, p = X.shape
    best, best_b = np.inf, None
    for rows in combinations(range(n), p):
        A = X[list(rows)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        b = np.linalg.solve(A, y[list(rows)])
        obj = check_loss(y - X @ b, tau).sum()
        if obj < best:
            best, best_b = obj, b
    return best, best_b


def random_qr_instance(rng):
    n = int(rng.integers(5, 31))
    p = int(rng.integers(1, 4))
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = X @ rng.normal(size=p) + rng.standard_t(3, size=n)
    tau = float(rng.uniform(0.05, 0.95))
    return X, y, tau
