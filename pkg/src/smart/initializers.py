"""Target-only estimators used as warm starts and as baselines."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from smart.linalg import as_matrix, svd
from smart.solver import SmartFactors


class LassoStallWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class InitSpec:
    method: str = "lasso"
    lambda0: float | None = None
    cd_tol: float = 1e-8
    cd_max_pass: int = 10000

    def __post_init__(self):
        if self.method not in ("lasso", "ridge", "ols"):
            raise ValueError(f"unknown initializer {self.method!r}")
        if self.lambda0 is not None and self.lambda0 < 0:
            raise ValueError("lambda0 must be nonnegative")


@dataclass
class LassoResult:
    coef: np.ndarray
    passes: int
    converged: bool


def lasso_objective(X, Y, C, lambda0):
    n = X.shape[0]
    R = Y - X @ C
    return 0.5 / n * float(np.sum(R * R)) + lambda0 * float(np.sum(np.abs(C)))


def lasso_path_cd(X, Y, lambda0: float, spec: InitSpec = InitSpec(), C0=None) -> LassoResult:
    """Cyclic coordinate descent for ``(1/2n)||Y - XC||_F^2 + lambda0 |C|_1``.

    The q column problems share X, so each coordinate step is applied to all
    columns at once; columns remain independent problems.
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if lambda0 < 0:
        raise ValueError("lambda0 must be nonnegative")
    n, p = X.shape
    q = Y.shape[1]
    G = X.T @ X / n
    B = X.T @ Y / n
    C = np.zeros((p, q)) if C0 is None else np.array(C0, dtype=float)
    diag = np.diag(G).copy()
    # grad holds G @ C - B, kept current after every coordinate step
    grad = G @ C - B
    converged = False
    passes = 0
    for passes in range(1, spec.cd_max_pass + 1):
        max_delta = 0.0
        for j in range(p):
            if diag[j] <= 0.0:
                continue
            old = C[j]
            z = old - grad[j] / diag[j]
            new = np.sign(z) * np.maximum(np.abs(z) - lambda0 / diag[j], 0.0)
            delta = new - old
            if np.any(delta):
                C[j] = new
                grad += np.outer(G[:, j], delta)
                max_delta = max(max_delta, float(np.max(np.abs(delta))))
        if max_delta <= spec.cd_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"lasso coordinate descent stalled after {passes} passes", LassoStallWarning)
    return LassoResult(C, passes, converged)


def lasso_fit(X, Y, lambda0: float, spec: InitSpec = InitSpec()) -> np.ndarray:
    return lasso_path_cd(X, Y, lambda0, spec).coef


def ridge_fit(X, Y, lambda0: float) -> np.ndarray:
    """``(X^T X + n lambda0 I)^{-1} X^T Y`` by Cholesky."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if lambda0 <= 0:
        raise ValueError("ridge requires lambda0 > 0")
    n, p = X.shape
    A = X.T @ X
    A[np.diag_indices(p)] += n * lambda0
    return cho_solve(cho_factor(A), X.T @ Y)


def ols_fit(X, Y) -> np.ndarray:
    """Minimum-norm least squares via the SVD pseudoinverse."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    tri = svd(X)
    if tri.d.size == 0 or tri.d[0] == 0:
        return np.zeros((X.shape[1], Y.shape[1]))
    keep = tri.d > 1e-10 * tri.d[0]
    U, d, V = tri.U[:, keep], tri.d[keep], tri.V[:, keep]
    return V @ ((U.T @ Y) / d[:, None])


def ridge_gcv(X, Y, grid=None) -> tuple[np.ndarray, float]:
    """Ridge with lambda0 chosen by generalized cross-validation on a log grid."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    n = X.shape[0]
    if grid is None:
        grid = np.logspace(-4, 2, 25)
    tri = svd(X)
    UtY = tri.U.T @ Y
    d2 = tri.d ** 2
    resid_perp = float(np.sum(Y * Y) - np.sum(UtY * UtY))
    best = None
    for lam in grid:
        shrink = d2 / (d2 + n * lam)
        rss = resid_perp + float(np.sum(((1 - shrink)[:, None] * UtY) ** 2))
        dof = float(np.sum(shrink))
        score = rss / max(n - dof, 1e-12) ** 2
        if best is None or score < best[0]:
            best = (score, float(lam))
    return ridge_fit(X, Y, best[1]), best[1]


def mad_sigma(X, Y) -> float:
    """Noise scale from the median absolute ridge residual (times 1.4826)."""
    C, _ = ridge_gcv(X, Y)
    R = as_matrix(Y) - as_matrix(X) @ C
    return 1.4826 * float(np.median(np.abs(R)))


def default_lasso_lambda(X, Y) -> float:
    """Plug-in level ``sigma_hat * sqrt(2 log(pq) / n)``."""
    n, p = np.shape(X)
    q = np.shape(Y)[1]
    return mad_sigma(X, Y) * np.sqrt(2.0 * np.log(p * q) / n)


def warm_start(C_init, r: int) -> SmartFactors:
    """Top-`r` SVD factors of a coefficient estimate."""
    C = as_matrix(C_init, "C_init")
    if not 1 <= r <= min(C.shape):
        raise ValueError(f"rank r={r} must lie in [1, {min(C.shape)}]")
    tri = svd(C)
    return SmartFactors(tri.U[:, :r].copy(), tri.d[:r].copy(), tri.V[:, :r].copy())


def initial_estimate(X, Y, spec: InitSpec = InitSpec()) -> np.ndarray:
    if spec.method == "ols":
        return ols_fit(X, Y)
    if spec.method == "ridge":
        if spec.lambda0 is None:
            return ridge_gcv(X, Y)[0]
        return ridge_fit(X, Y, spec.lambda0)
    lam = default_lasso_lambda(X, Y) if spec.lambda0 is None else spec.lambda0
    return lasso_fit(X, Y, lam, spec)


def default_warm_start(X, Y, r: int, spec: InitSpec = InitSpec()) -> SmartFactors:
    return warm_start(initial_estimate(X, Y, spec), r)
