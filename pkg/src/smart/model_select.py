"""Hyperparameter selection: BIC over the penalty levels, target rank, and
K-fold cross-validation over the source truncation levels.

The intended workflow is rank first, then truncation levels by CV, with the
penalty pair re-selected by BIC inside every candidate fit (`auto_fit`).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Optional

import numpy as np

from smart._pool import ordered_map
from smart.initializers import default_warm_start, mad_sigma
from smart.linalg import NumericalError, RankDeficientError, as_matrix, svd
from smart.solver import (FitReport, SmartFactors, SolverConfig, SourceSpectralBasis,
                          build_source_basis, smart_fit)

NNZ_TOL = 1e-8
RSS_FLOOR = 1e-12


class SelectionError(RuntimeError):
    """Every candidate fit failed."""


@dataclass(frozen=True)
class SelectionGrid:
    """Candidate values for the penalty levels and source truncation levels.

    By default every (lambda_u, lambda_v) combination and every (r_u, r_v)
    combination is a candidate. ``tie_lambdas`` / ``pair_truncations`` zip
    the two grids elementwise instead, which keeps desk-scale sweeps cheap.
    """

    lambda_u_grid: tuple = (0.05, 0.1, 0.2)
    lambda_v_grid: tuple = (0.05, 0.1, 0.2)
    ru_grid: tuple = (10,)
    rv_grid: tuple = (10,)
    k_folds: int = 5
    seed: int = 0
    tie_lambdas: bool = False
    pair_truncations: bool = False

    def __post_init__(self):
        for name in ("lambda_u_grid", "lambda_v_grid", "ru_grid", "rv_grid"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be non-empty")
            object.__setattr__(self, name, vals)
        if min(self.lambda_u_grid + self.lambda_v_grid) < 0:
            raise ValueError("penalty levels must be nonnegative")
        if min(self.ru_grid + self.rv_grid) < 0:
            raise ValueError("truncation levels must be nonnegative")
        if self.k_folds < 2:
            raise ValueError("k_folds must be at least 2")
        if self.tie_lambdas and len(self.lambda_u_grid) != len(self.lambda_v_grid):
            raise ValueError("tied penalty grids need equal lengths")
        if self.pair_truncations and len(self.ru_grid) != len(self.rv_grid):
            raise ValueError("paired truncation grids need equal lengths")

    def lambda_pairs(self) -> list:
        if self.tie_lambdas:
            return [(float(a), float(b)) for a, b in zip(self.lambda_u_grid, self.lambda_v_grid)]
        return [(float(a), float(b)) for a in self.lambda_u_grid for b in self.lambda_v_grid]

    def truncation_pairs(self, p: Optional[int] = None, q: Optional[int] = None) -> list:
        """Candidate (r_u, r_v) pairs, clipped to (p, q) and de-duplicated in order."""
        if self.pair_truncations:
            raw = list(zip(self.ru_grid, self.rv_grid))
        else:
            raw = [(a, b) for a in self.ru_grid for b in self.rv_grid]
        out = []
        for a, b in raw:
            a = int(a) if p is None else min(int(a), p)
            b = int(b) if q is None else min(int(b), q)
            if (a, b) not in out:
                out.append((a, b))
        return out


def default_lambda_grid(X, Y, multipliers=(0.25, 0.5, 1.0, 2.0)) -> tuple:
    """Penalty levels scaled by ``sigma_hat * sqrt(log(pq) / n)``."""
    n, p = np.shape(X)
    q = np.shape(Y)[1]
    base = mad_sigma(X, Y) * np.sqrt(np.log(p * q) / n)
    return tuple(float(base * m) for m in multipliers)


# -------------------------------------------------------------------- BIC

def support_size(fit: FitReport, tol: float = NNZ_TOL) -> int:
    k = 0
    for om in (fit.Omega_u, fit.Omega_v):
        if om is not None:
            k += int(np.sum(np.abs(om) > tol))
    return k


def bic_score(fit: FitReport, X, Y) -> float:
    """``nq log(RSS / nq) + (|Omega_u|_0 + |Omega_v|_0) log(nq)``."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[1] != fit.C_hat.shape[0] or Y.shape[1] != fit.C_hat.shape[1] \
            or X.shape[0] != Y.shape[0]:
        raise ValueError(f"fit of shape {fit.C_hat.shape} does not match X{X.shape}, Y{Y.shape}")
    nq = Y.size
    R = Y - X @ fit.C_hat
    rss = max(float(np.sum(R * R)), RSS_FLOOR)
    return nq * np.log(rss / nq) + support_size(fit) * np.log(nq)


# ------------------------------------------------------------- lambdas

@dataclass
class LambdaSelection:
    lambda_u: float
    lambda_v: float
    fit: FitReport
    scores: list = field(default_factory=list)  # (lambda_u, lambda_v, bic or nan) in grid order


def _effective_key(basis: SourceSpectralBasis, lu, lv):
    # a penalty with no complement block has no effect on the fit
    return (lu if basis.U_perp is not None else None, lv if basis.V_perp is not None else None)


def select_lambda_path(X, Y, source, r: int, r_u: int, r_v: int, grid: SelectionGrid,
                       cfg: SolverConfig = SolverConfig(),
                       init: Optional[SmartFactors] = None) -> LambdaSelection:
    """BIC selection over the penalty pairs of `grid`; see `select_lambdas`."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    basis = source.truncate(r_u, r_v) if isinstance(source, SourceSpectralBasis) \
        else build_source_basis(source, r_u, r_v)
    if init is None:
        init = default_warm_start(X, Y, r)
    cache = {}
    scores = []
    best = None
    warm = init
    for lu, lv in grid.lambda_pairs():
        key = _effective_key(basis, lu, lv)
        if key in cache:
            fit = cache[key]
        else:
            try:
                fit = smart_fit(X, Y, basis, r, r_u, r_v, lu, lv, init=warm, cfg=cfg)
            except (NumericalError, RankDeficientError, np.linalg.LinAlgError,
                    FloatingPointError) as exc:
                warnings.warn(f"fit at lambda=({lu}, {lv}) failed: {exc}", RuntimeWarning)
                fit = None
            cache[key] = fit
            if fit is not None:
                warm = fit.factors
        if fit is None:
            scores.append((lu, lv, float("nan")))
            continue
        b = bic_score(fit, X, Y)
        scores.append((lu, lv, b))
        # strict improvement, or an exact tie resolved toward the larger penalty sum
        if best is None or b < best[0] or (b == best[0] and lu + lv > best[1] + best[2]):
            best = (b, lu, lv, fit)
    if best is None:
        raise SelectionError("every penalty pair in the grid failed to fit")
    return LambdaSelection(best[1], best[2], best[3], scores)


def select_lambdas(X, Y, C0_tilde, r: int, r_u: int, r_v: int, grid: SelectionGrid,
                   cfg: SolverConfig = SolverConfig(), init: Optional[SmartFactors] = None):
    """Fit every penalty pair and keep the BIC minimizer.

    Each fit is warm-started from the previous successful one, in grid
    order. Ties go to the larger ``lambda_u + lambda_v``, then to the earlier
    grid position. Returns ``(lambda_u, lambda_v, fit)``.
    """
    sel = select_lambda_path(X, Y, C0_tilde, r, r_u, r_v, grid, cfg, init)
    return sel.lambda_u, sel.lambda_v, sel.fit


# ---------------------------------------------------------------- rank

def select_rank(X, Y) -> int:
    """Self-tuning rank rule: count singular values of the projected response
    above ``2 S (sqrt(q) + sqrt(m))``.

    ``m`` is the rank of X and ``S^2`` the residual variance of the
    least-squares fit; when there are no residual degrees of freedom, S^2 is
    taken from the smaller half of the squared singular values of
    ``Y / sqrt(n)``.
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    n, p = X.shape
    q = Y.shape[1]
    if n < 2:
        raise ValueError("rank selection needs n > 1")
    if not np.any(Y):
        return 1
    tx = svd(X)
    ev = tx.d ** 2
    m = int(np.sum(ev > 1e-10 * ev[0])) if ev.size and ev[0] > 0 else 0
    Ux = tx.U[:, :m]
    PY = Ux @ (Ux.T @ Y)
    lam = np.linalg.svd(PY, compute_uv=False)
    if n * q > m * q:
        R = Y - PY
        S2 = float(np.sum(R * R)) / (n * q - m * q)
    else:
        s2 = np.sort(np.linalg.svd(Y / np.sqrt(n), compute_uv=False) ** 2)
        S2 = float(np.mean(s2[: max(1, s2.size // 2)]))
    mu = 2.0 * np.sqrt(S2) * (np.sqrt(q) + np.sqrt(m))
    r_hat = int(np.sum(lam >= mu))
    return int(min(max(1, r_hat), min(p, q)))


# ------------------------------------------------------------------ CV

def fold_indices(n: int, k: int, seed: int) -> list:
    """Shuffle row indices with `seed`, then cut into `k` contiguous folds."""
    if k < 2 or k > n:
        raise ValueError(f"k_folds={k} must lie in [2, n={n}]")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass
class CvResult:
    r_u: int
    r_v: int
    pairs: list
    mean_errors: list
    fold_errors: list  # per pair, per fold


def _cv_task(task, X, Y, basis, r, grid, cfg):
    (r_u, r_v), train, val, init = task
    Xt, Yt = X[train], Y[train]
    try:
        sel = select_lambda_path(Xt, Yt, basis, r, r_u, r_v, grid, cfg, init)
    except SelectionError:
        return float("nan")
    R = X[val] @ sel.fit.C_hat - Y[val]
    return float(np.sum(R * R)) / R.size


def cv_truncation_table(X, Y, C0_tilde, r: int, grid: SelectionGrid,
                        cfg: SolverConfig = SolverConfig(), jobs: int = 1) -> CvResult:
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    n, p = X.shape
    q = Y.shape[1]
    basis = C0_tilde if isinstance(C0_tilde, SourceSpectralBasis) \
        else build_source_basis(C0_tilde, 0, 0)
    pairs = grid.truncation_pairs(p, q)
    if len(pairs) == 1:
        return CvResult(*pairs[0], pairs, [float("nan")], [[]])
    folds = fold_indices(n, grid.k_folds, grid.seed)
    splits = []
    for f in folds:
        train = np.setdiff1d(np.arange(n), f)
        splits.append((train, f, default_warm_start(X[train], Y[train], r)))
    tasks = [(pair, tr, va, ini) for pair in pairs for tr, va, ini in splits]
    errs = ordered_map(partial(_cv_task, X=X, Y=Y, basis=basis, r=r, grid=grid, cfg=cfg),
                       tasks, jobs)
    k = len(folds)
    fold_errors = [errs[i * k:(i + 1) * k] for i in range(len(pairs))]
    means = [float(np.mean(e)) if np.all(np.isfinite(e)) else float("inf") for e in fold_errors]
    best = None
    for i, (pair, m) in enumerate(zip(pairs, means)):
        # lower mean error, then smaller r_u + r_v, then grid order
        if best is None or m < means[best] or (m == means[best] and sum(pair) < sum(pairs[best])):
            best = i
    if not np.isfinite(means[best]):
        raise SelectionError("cross-validation failed for every truncation pair")
    return CvResult(*pairs[best], pairs, means, fold_errors)


def cv_select_truncation(X, Y, C0_tilde, r: int, grid: SelectionGrid,
                         cfg: SolverConfig = SolverConfig(), jobs: int = 1):
    """K-fold CV over (r_u, r_v); the penalty pair is re-selected by BIC on
    every training fold. Returns ``(r_u, r_v)``."""
    res = cv_truncation_table(X, Y, C0_tilde, r, grid, cfg, jobs)
    return res.r_u, res.r_v


# ------------------------------------------------------------ workflow

@dataclass
class AutoFit:
    rank: int
    r_u: int
    r_v: int
    lambda_u: float
    lambda_v: float
    fit: FitReport
    cv: Optional[CvResult] = None
    bic_scores: list = field(default_factory=list)


def auto_fit(X, Y, C0_tilde, grid: SelectionGrid, cfg: SolverConfig = SolverConfig(),
             rank: Optional[int] = None, r_u: Optional[int] = None, r_v: Optional[int] = None,
             jobs: int = 1) -> AutoFit:
    """Rank, then truncation levels by CV, then penalties by BIC, then the final fit.

    Any of `rank`, `r_u`, `r_v` given explicitly skips that stage; giving
    only one truncation level restricts CV to candidates with that value.
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    p, q = X.shape[1], Y.shape[1]
    basis = C0_tilde if isinstance(C0_tilde, SourceSpectralBasis) \
        else build_source_basis(C0_tilde, 0, 0)
    r = select_rank(X, Y) if rank is None else int(rank)
    cv = None
    if r_u is None or r_v is None:
        g = grid
        if r_u is not None or r_v is not None:
            pairs = [(a, b) for a, b in grid.truncation_pairs(p, q)
                     if (r_u is None or a == r_u) and (r_v is None or b == r_v)]
            if not pairs:
                pairs = [(r_u if r_u is not None else a, r_v if r_v is not None else b)
                         for a, b in grid.truncation_pairs(p, q)][:1]
            g = replace(grid, ru_grid=tuple(a for a, _ in pairs),
                        rv_grid=tuple(b for _, b in pairs), pair_truncations=True)
        cv = cv_truncation_table(X, Y, basis, r, g, cfg, jobs)
        r_u, r_v = cv.r_u, cv.r_v
    sel = select_lambda_path(X, Y, basis, r, int(r_u), int(r_v), grid, cfg)
    return AutoFit(r, int(r_u), int(r_v), sel.lambda_u, sel.lambda_v, sel.fit, cv, sel.scores)
