"""Riemannian conjugate gradient on the Stiefel manifold {M : M^T M = I}.

Embedded metric, QR retraction, projection-based vector transport and an
Armijo backtracking line search. Used for the U- and V-blocks of the ADMM
solver, but written against a generic smooth cost.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from smart.linalg import RankDeficientError


class StepFailure(RankDeficientError):
    """The retraction of a trial step was rank deficient."""


@dataclass
class SmoothCost:
    """A smooth cost with its Euclidean gradient.

    `value_and_egrad` may be supplied to share work between the two; by
    default it calls `value` and `egrad` separately.
    """

    value: Callable[[np.ndarray], float]
    egrad: Callable[[np.ndarray], np.ndarray]
    value_and_egrad: Optional[Callable[[np.ndarray], tuple]] = None

    def both(self, M):
        if self.value_and_egrad is not None:
            return self.value_and_egrad(M)
        return self.value(M), self.egrad(M)


@dataclass(frozen=True)
class RcgConfig:
    max_iters: int = 200
    grad_tol: float = 1e-7
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    initial_step: float = 1.0
    max_backtracks: int = 50

    def __post_init__(self):
        if self.max_iters < 0 or self.grad_tol <= 0 or self.armijo_c <= 0 or self.initial_step <= 0:
            raise ValueError("RcgConfig values must be positive")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack must lie in (0, 1)")


@dataclass
class RcgResult:
    point: np.ndarray
    value: float
    grad_norm: float
    iters: int
    stalled: bool = False


def _sym(A):
    return 0.5 * (A + A.T)


def tangent_project(M, G) -> np.ndarray:
    """Orthogonal projection of `G` onto the tangent space at `M`."""
    return G - M @ _sym(M.T @ G)


def retract(M, xi) -> np.ndarray:
    """QR retraction: the Q factor of ``M + xi`` with positive diag(R).

    For a tangent `xi` the Gram matrix of ``M + xi`` is ``I + xi^T xi``, so a
    Cholesky-based QR is accurate and much cheaper than Householder for thin
    blocks; it falls back to Householder when the Gram matrix is poorly
    conditioned.
    """
    A = M + xi
    try:
        L = np.linalg.cholesky(A.T @ A)
        # diag(L) alone can look balanced when the Gram matrix is not (large off-diagonal L)
        if L.size and np.min(np.diag(L)) > 1e-2 * np.max(np.abs(L)):
            return A @ np.linalg.inv(L.T)
    except np.linalg.LinAlgError:
        pass
    Q, R = np.linalg.qr(A)
    diag = np.diag(R)
    if np.min(np.abs(diag)) <= 1e-12:
        raise StepFailure("retraction is rank deficient")
    return Q * np.sign(diag)


def riemannian_grad(M, egrad) -> np.ndarray:
    return tangent_project(M, egrad)


def _splitter(row_blocks, free_rows=0):
    """Projection and retraction for Stiefel factors stacked by rows.

    The last `free_rows` rows (if any) form an unconstrained Euclidean block.
    """
    if row_blocks is None and not free_rows:
        return tangent_project, retract
    sizes = list(row_blocks) if row_blocks is not None else []
    edges = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    blocks = [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]
    free = slice(edges[-1], None)

    def proj(M, G):
        out = np.empty_like(G)
        for s in blocks:
            out[s] = tangent_project(M[s], G[s])
        out[free] = G[free]
        return out

    def retr(M, xi):
        out = np.empty_like(M)
        for s in blocks:
            out[s] = retract(M[s], xi[s])
        out[free] = M[free] + xi[free]
        return out

    return proj, retr


def minimize(cost: SmoothCost, init, cfg: RcgConfig = RcgConfig(), row_blocks=None,
             free_rows: int = 0) -> RcgResult:
    """Polak-Ribiere+ conjugate gradient from the feasible point `init`.

    Accepted iterates never increase the cost. The search direction falls
    back to steepest descent whenever the PR+ coefficient vanishes or the
    direction stops being a descent direction. A line search that cannot
    satisfy Armijo after `cfg.max_backtracks` halvings ends the run with
    ``stalled=True``.

    With `row_blocks` (e.g. ``(p, q)``) the point is a vertical stack of
    several Stiefel matrices optimized jointly on their product; `free_rows`
    appends that many unconstrained rows below them.
    """
    tangent_project, retract = _splitter(row_blocks, free_rows)
    x = np.array(init, dtype=np.float64)
    f, eg = cost.both(x)
    g = tangent_project(x, eg)
    gg = float(np.vdot(g, g))
    gnorm = np.sqrt(gg)
    if gnorm <= cfg.grad_tol:
        return RcgResult(x, f, gnorm, 0)

    d = -g
    f_prev = None
    last_step = cfg.initial_step
    it = 0
    stalled = False
    while it < cfg.max_iters:
        slope = float(np.vdot(g, d))
        if slope >= 0.0:
            d = -g
            slope = -gg
        dnorm = np.sqrt(float(np.vdot(d, d)))

        # initial trial step: expect the same decrease as last iteration
        if f_prev is not None and f_prev > f:
            t = 2.0 * (f_prev - f) / -slope
        else:
            t = cfg.initial_step / max(dnorm, 1e-300) if it == 0 else last_step * 2.0
        if not np.isfinite(t) or t <= 0:
            t = cfg.initial_step

        accepted = False
        for _ in range(cfg.max_backtracks):
            try:
                x_new = retract(x, t * d)
            except StepFailure:
                t *= cfg.backtrack
                continue
            f_new, eg_new = cost.both(x_new)
            if f_new <= f + cfg.armijo_c * t * slope:
                accepted = True
                break
            t *= cfg.backtrack
        if not accepted:
            stalled = True
            break

        it += 1
        last_step = t
        g_new = tangent_project(x_new, eg_new)
        gg_new = float(np.vdot(g_new, g_new))
        # projection transport of the old gradient and direction
        g_old_t = tangent_project(x_new, g)
        d_t = tangent_project(x_new, d)
        beta = max(0.0, float(np.vdot(g_new, g_new - g_old_t)) / gg)

        f_prev, f = f, f_new
        x, g, gg = x_new, g_new, gg_new
        gnorm = np.sqrt(gg)
        if gnorm <= cfg.grad_tol:
            break
        d = -g + beta * d_t

    return RcgResult(x, f, gnorm, it, stalled)
