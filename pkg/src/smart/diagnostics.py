"""Spectral-similarity quantities computed from known ground truth.

These drive the error rate of the estimator: alignment counts s_u(r_u),
s_v(r_v) of the target singular vectors against the penalized source
complement, the minimal containing truncation levels r_u*, r_v*, the
conditioning factor eta_r, the source error eps0 = ||C0_tilde - C0||_2 and
the combined source term eps_source.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from smart.linalg import as_matrix, complete_basis, svd

ZERO_TOL = 1e-8


def full_basis(U0) -> np.ndarray:
    """`U0` with its deterministic orthonormal completion appended (p x p)."""
    U0 = as_matrix(U0, "U0")
    if U0.shape[1] > U0.shape[0]:
        raise ValueError(f"basis has more columns than rows: {U0.shape}")
    return np.hstack([U0, complete_basis(U0)])


def alignment_counts(U_star, U0, r_u: int, tol: float = ZERO_TOL) -> int:
    """s_u(r_u): nonzeros (|.| > tol) of ``U*^T U_perp(r_u)``.

    `U0` may be the leading source vectors or an already completed basis.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    U_star = as_matrix(U_star, "U_star")
    B = full_basis(U0)
    p = B.shape[0]
    if U_star.shape[0] != p:
        raise ValueError(f"U_star has {U_star.shape[0]} rows, basis has {p}")
    if not 0 <= r_u <= p:
        raise ValueError(f"r_u={r_u} outside [0, {p}]")
    return int(np.sum(np.abs(U_star.T @ B[:, r_u:]) > tol))


def alignment_profile(U_star, U0, levels: Sequence[int], tol: float = ZERO_TOL) -> list:
    """s_u over several truncation levels, sharing one projection."""
    U_star = as_matrix(U_star, "U_star")
    B = full_basis(U0)
    nz = np.abs(U_star.T @ B) > tol           # r x p
    tail = np.cumsum(nz.sum(axis=0)[::-1])[::-1]  # tail[k] = nonzeros in columns k..p-1
    tail = np.append(tail, 0)
    out = []
    for k in levels:
        if not 0 <= k <= B.shape[0]:
            raise ValueError(f"truncation level {k} outside [0, {B.shape[0]}]")
        out.append(int(tail[k]))
    return out


def min_truncation(U_star, U0, tol: float = ZERO_TOL) -> int:
    """r_u*: smallest r_u with ``||(I - Us Us^T) U*||_F <= tol * sqrt(r)``."""
    U_star = as_matrix(U_star, "U_star")
    B = full_basis(U0)
    p = B.shape[0]
    r = U_star.shape[1]
    P = B.T @ U_star
    # the residual after keeping k columns is the norm of the remaining coefficients
    tail = np.sqrt(np.append(np.cumsum(np.sum(P * P, axis=1)[::-1])[::-1], 0.0))
    thresh = tol * np.sqrt(r)
    for k in range(p + 1):
        if tail[k] <= thresh:
            return k
    return p


def conditioning_factor(d_star, tau: float = 0.5) -> float:
    """eta_r = 1 + (1/tau) * sqrt(sum_j (d_1 / d_j)^2)."""
    d = np.asarray(d_star, dtype=float).ravel()
    if d.size == 0 or np.any(d <= 0):
        raise ValueError("singular values must be positive")
    if np.any(np.diff(d) > 0):
        raise ValueError("singular values must be non-increasing")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    return float(1.0 + np.sqrt(np.sum((d[0] / d) ** 2)) / tau)


def spectral_norm(A) -> float:
    A = as_matrix(A)
    if A.size == 0:
        return 0.0
    return float(np.linalg.svd(A, compute_uv=False)[0])


def source_error_terms(C0_clean, C0_tilde, r: int, r_u: int, r_v: int, s_u: int, s_v: int,
                       r_u_star: int, r_v_star: int, d1_source: Optional[float] = None):
    """(eps0, eps_source) for truncation levels (r_u, r_v).

    eps_source = [r((r_u*-r_u)+ + (r_v*-r_v)+) - (s_u+s_v)]^{1/2} eps0^{1/2} (2 d1 + eps0)^{1/2}
               + sqrt(r) [(r_u*)^{1/4} sqrt(p - max(r_u*, r_u))
                          + (r_v*)^{1/4} sqrt(q - max(r_v*, r_v))]^{1/2} eps0^{1/4} (2 d1 + eps0)^{1/4}

    with d1 the top singular value of the clean source. The first bracket is
    nonnegative for consistent counts; it is clamped at 0 otherwise.
    """
    C0 = as_matrix(C0_clean, "C0_clean")
    Ct = as_matrix(C0_tilde, "C0_tilde")
    if C0.shape != Ct.shape:
        raise ValueError(f"source shapes differ: {C0.shape} vs {Ct.shape}")
    p, q = C0.shape
    eps0 = spectral_norm(Ct - C0)
    d1 = spectral_norm(C0) if d1_source is None else float(d1_source)
    pos = lambda t: max(t, 0)
    first = r * (pos(r_u_star - r_u) + pos(r_v_star - r_v)) - (s_u + s_v)
    term1 = np.sqrt(max(first, 0)) * np.sqrt(eps0) * np.sqrt(2 * d1 + eps0)
    inner = (r_u_star ** 0.25 * np.sqrt(p - max(r_u_star, r_u))
             + r_v_star ** 0.25 * np.sqrt(q - max(r_v_star, r_v)))
    term2 = np.sqrt(r) * np.sqrt(inner) * eps0 ** 0.25 * (2 * d1 + eps0) ** 0.25
    return eps0, float(term1 + term2)


def bound_terms(eta_r: float, r: int, r_u: int, r_v: int, s_u: int, s_v: int, p: int, q: int,
                n: int, eps_source: float, d1_star: float, delta: float = 0.05,
                alpha_max: float = 1.0):
    """The two terms of the high-probability error bound, without its universal constant.

    Returns ``(estimation, source)``; the source term vanishes with a clean source.
    """
    L = np.log(12 * r * max(p, q) / delta)
    dof = r * (r_u + r_v + 1) + s_u + s_v
    est = np.sqrt(alpha_max) * eta_r * np.sqrt(dof * L / n)
    src = alpha_max ** 0.25 * np.sqrt(d1_star) * eps_source * (L / n) ** 0.25
    return float(est), float(src)


@dataclass
class SpectralDiagnostics:
    ru_levels: list
    s_u_of_ru: list
    rv_levels: list
    s_v_of_rv: list
    r_u_star: int
    r_v_star: int
    s_u_star: int
    s_v_star: int
    eta_r: float
    eps0: float
    eps_source: float
    r: int
    r_u: int
    r_v: int
    s_u: int
    s_v: int
    tau: float
    tol: float
    bound: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def spectral_diagnostics(C0_clean, C0_tilde, C_star, r_u: int, r_v: int, tau: float = 0.5,
                         ru_levels=None, rv_levels=None, tol: float = ZERO_TOL,
                         n: Optional[int] = None, delta: float = 0.05) -> SpectralDiagnostics:
    """All diagnostics from the clean source, the noisy source and the target.

    Source and target singular vectors come from the package SVD; the
    numerical rank uses the 1e-10 relative cutoff of the solver.
    """
    C0 = as_matrix(C0_clean, "C0_clean")
    Cs = as_matrix(C_star, "C_star")
    if C0.shape != Cs.shape:
        raise ValueError(f"source {C0.shape} and target {Cs.shape} shapes differ")
    p, q = C0.shape
    src = svd(C0)
    r0 = int(np.sum(src.d > 1e-10 * src.d[0])) if src.d[0] > 0 else 0
    U0, V0 = src.U[:, :r0], src.V[:, :r0]
    tgt = svd(Cs)
    r = int(np.sum(tgt.d > 1e-10 * tgt.d[0])) if tgt.d[0] > 0 else 0
    if r == 0:
        raise ValueError("target coefficient matrix is zero")
    U_star, V_star, d_star = tgt.U[:, :r], tgt.V[:, :r], tgt.d[:r]
    ru_levels = list(range(0, min(p, max(r0, r_u) + 1) + 1)) if ru_levels is None else list(ru_levels)
    rv_levels = list(range(0, min(q, max(r0, r_v) + 1) + 1)) if rv_levels is None else list(rv_levels)
    s_u_tab = alignment_profile(U_star, U0, ru_levels, tol)
    s_v_tab = alignment_profile(V_star, V0, rv_levels, tol)
    rus, rvs = min_truncation(U_star, U0, tol), min_truncation(V_star, V0, tol)
    s_u = alignment_profile(U_star, U0, [r_u], tol)[0]
    s_v = alignment_profile(V_star, V0, [r_v], tol)[0]
    eta = conditioning_factor(d_star, tau)
    eps0, eps_src = source_error_terms(C0, C0_tilde, r, r_u, r_v, s_u, s_v, rus, rvs,
                                       d1_source=src.d[0])
    bound = {}
    if n is not None:
        est, srct = bound_terms(eta, r, r_u, r_v, s_u, s_v, p, q, n, eps_src, d_star[0], delta)
        bound = {"n": int(n), "delta": float(delta), "estimation_term": est, "source_term": srct}
    return SpectralDiagnostics(
        ru_levels=ru_levels, s_u_of_ru=s_u_tab, rv_levels=rv_levels, s_v_of_rv=s_v_tab,
        r_u_star=rus, r_v_star=rvs,
        s_u_star=alignment_profile(U_star, U0, [0], tol)[0],
        s_v_star=alignment_profile(V_star, V0, [0], tol)[0],
        eta_r=eta, eps0=eps0, eps_source=eps_src, r=r, r_u=int(r_u), r_v=int(r_v),
        s_u=s_u, s_v=s_v, tau=float(tau), tol=float(tol), bound=bound)
