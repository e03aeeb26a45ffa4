"""ADMM solver for the source-guided reduced-rank objective.

    min  (1/2n)||Y - X U D V^T||_F^2
         + lam_u |Us_perp^T U D|_1 + lam_v |Vs_perp^T V D|_1
    s.t. U^T U = I_r, V^T V = I_r, D = diag(d) >= 0

where ``Us_perp`` / ``Vs_perp`` are the trailing columns of full orthonormal
bases built from the SVD of a (noisy) source coefficient matrix. The
l1 terms are split off through auxiliary blocks ``Omega_u = Us_perp^T U D``
and ``Omega_v = Vs_perp^T V D`` with scaled duals ``Gamma_u``, ``Gamma_v``;
U and V are updated on the Stiefel manifold, D and the Omegas in closed form.
A block whose complement is empty (``r_u == p`` or ``r_v == q``) is dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from smart.linalg import as_matrix, complete_basis, soft_threshold, svd
from smart.stiefel import RcgConfig, RcgResult, SmoothCost, minimize, tangent_project

RHO_MAX = 1e8


@dataclass(frozen=True)
class SourceSpectralBasis:
    """Full orthonormal bases from the source SVD plus truncation levels.

    Columns ``0..r0_tilde-1`` are source singular vectors (descending
    singular values); the rest is the deterministic completion.
    """

    U_full: np.ndarray
    V_full: np.ndarray
    r_u: int
    r_v: int
    r0_tilde: int
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def p(self) -> int:
        return self.U_full.shape[0]

    @property
    def q(self) -> int:
        return self.V_full.shape[0]

    @property
    def U_s(self):
        return self.U_full[:, : self.r_u]

    @property
    def V_s(self):
        return self.V_full[:, : self.r_v]

    @property
    def U_perp(self) -> Optional[np.ndarray]:
        return None if self.r_u == self.p else self.U_full[:, self.r_u :]

    @property
    def V_perp(self) -> Optional[np.ndarray]:
        return None if self.r_v == self.q else self.V_full[:, self.r_v :]

    def truncate(self, r_u: int, r_v: int) -> "SourceSpectralBasis":
        _check_truncation(r_u, r_v, self.p, self.q)
        return replace(self, r_u=int(r_u), r_v=int(r_v))


def _check_truncation(r_u, r_v, p, q):
    if not (0 <= r_u <= p and 0 <= r_v <= q):
        raise ValueError(f"truncation levels ({r_u}, {r_v}) outside [0, {p}] x [0, {q}]")


def build_source_basis(C0_tilde, r_u: int, r_v: int) -> SourceSpectralBasis:
    C0 = as_matrix(C0_tilde, "C0_tilde")
    p, q = C0.shape
    _check_truncation(r_u, r_v, p, q)
    tri = svd(C0)
    if tri.d.size and tri.d[0] > 0:
        r0 = int(np.sum(tri.d > 1e-10 * tri.d[0]))
    else:
        r0 = 0
    U0, V0 = tri.U[:, :r0], tri.V[:, :r0]
    U_full = np.hstack([U0, complete_basis(U0)])
    V_full = np.hstack([V0, complete_basis(V0)])
    return SourceSpectralBasis(U_full, V_full, int(r_u), int(r_v), r0, tri.d[:r0].copy())


@dataclass
class SmartFactors:
    U: np.ndarray
    D: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.D.size

    def product(self) -> np.ndarray:
        return (self.U * self.D) @ self.V.T


@dataclass
class AdmmState:
    U: np.ndarray
    D: np.ndarray
    V: np.ndarray
    Omega_u: Optional[np.ndarray]
    Omega_v: Optional[np.ndarray]
    Gamma_u: Optional[np.ndarray]
    Gamma_v: Optional[np.ndarray]
    rho: float
    t: int = 0

    @property
    def factors(self) -> SmartFactors:
        return SmartFactors(self.U, self.D, self.V)

    def copy(self) -> "AdmmState":
        cp = lambda a: None if a is None else a.copy()
        return AdmmState(self.U.copy(), self.D.copy(), self.V.copy(), cp(self.Omega_u),
                         cp(self.Omega_v), cp(self.Gamma_u), cp(self.Gamma_v), self.rho, self.t)


@dataclass(frozen=True)
class SolverConfig:
    rho0: float = 1.0
    gamma_rho: float = 1.05
    t_max: int = 500
    eps: float = 1e-4
    inner: RcgConfig = RcgConfig()
    joint_refine: bool = True
    joint_iters: int = 100
    inner_rel: float = 0.1

    def inner_for(self, m: int, r: int) -> RcgConfig:
        """Inner config for an m x r block; its tolerance never undercuts the outer test."""
        tol = max(self.inner.grad_tol, self.inner_rel * self.eps * np.sqrt(m * r))
        return replace(self.inner, grad_tol=tol)

    def __post_init__(self):
        if self.rho0 <= 0 or self.t_max < 0 or self.eps <= 0:
            raise ValueError("rho0, t_max and eps must be positive")
        if self.gamma_rho <= 1.0:
            raise ValueError("gamma_rho must exceed 1")


@dataclass
class FitReport:
    factors: SmartFactors
    C_hat: np.ndarray
    Omega_u: Optional[np.ndarray]
    Omega_v: Optional[np.ndarray]
    Gamma_u: Optional[np.ndarray]
    Gamma_v: Optional[np.ndarray]
    primal_residual: float
    stationarity_residual: float
    iterations: int
    converged: bool
    objective: float
    r_u: int
    r_v: int
    lambda_u: float
    lambda_v: float
    rho: float
    inner_stalls: int = 0

    @property
    def penalty_free(self) -> bool:
        return self.Omega_u is None and self.Omega_v is None

    def orthogonality_error(self) -> float:
        r = self.factors.rank
        eye = np.eye(r)
        U, V = self.factors.U, self.factors.V
        return max(np.linalg.norm(U.T @ U - eye), np.linalg.norm(V.T @ V - eye))


class _Problem:
    """Data-dependent quantities reused by every block update."""

    def __init__(self, X, Y, basis: SourceSpectralBasis):
        X = as_matrix(X, "X")
        Y = as_matrix(Y, "Y")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if X.shape[1] != basis.p or Y.shape[1] != basis.q:
            raise ValueError(
                f"data shapes X{X.shape}, Y{Y.shape} do not match source ({basis.p}, {basis.q})")
        self.X, self.Y = X, Y
        self.n = X.shape[0]
        self.G = X.T @ X / self.n
        self.XtY = X.T @ Y / self.n
        self.basis = basis
        self.Up = basis.U_perp
        self.Vp = basis.V_perp


def _dot(A, B) -> float:
    return float(np.vdot(A, B))


# ---------------------------------------------------------------- objective

def smart_objective(X, Y, factors: SmartFactors, basis: SourceSpectralBasis,
                    lambda_u: float, lambda_v: float) -> float:
    X = as_matrix(X)
    Y = as_matrix(Y)
    n = X.shape[0]
    R = Y - X @ factors.product()
    val = 0.5 / n * float(np.sum(R * R))
    if basis.U_perp is not None:
        val += lambda_u * float(np.sum(np.abs(basis.U_perp.T @ (factors.U * factors.D))))
    if basis.V_perp is not None:
        val += lambda_v * float(np.sum(np.abs(basis.V_perp.T @ (factors.V * factors.D))))
    return val


# ------------------------------------------------------------ block updates

def _u_cost(prob: _Problem, st: AdmmState) -> SmoothCost:
    # augmented term kept in residual form: expanding it cancels badly once rho is large
    D = st.D
    D2 = D * D
    G, Up = prob.G, prob.Up
    L = (prob.XtY @ st.V) * D

    def both(U):
        GU = G @ U
        val = 0.5 * _dot(U * D2, GU) - _dot(U, L)
        grad = GU * D2 - L
        if Up is not None:
            M = (Up.T @ U) * D - st.Omega_u
            val += _dot(st.Gamma_u, M) + 0.5 * st.rho * _dot(M, M)
            grad = grad + Up @ ((st.Gamma_u + st.rho * M) * D)
        return val, grad

    return SmoothCost(lambda U: both(U)[0], lambda U: both(U)[1], both)


def _v_cost(prob: _Problem, st: AdmmState) -> SmoothCost:
    # the loss is V-invariant up to a constant on the manifold; only its linear part remains
    D = st.D
    Vp = prob.Vp
    L = (prob.XtY.T @ st.U) * D

    def both(V):
        val = -_dot(V, L)
        grad = -L
        if Vp is not None:
            M = (Vp.T @ V) * D - st.Omega_v
            val += _dot(st.Gamma_v, M) + 0.5 * st.rho * _dot(M, M)
            grad = grad + Vp @ ((st.Gamma_v + st.rho * M) * D)
        return val, grad

    return SmoothCost(lambda V: both(V)[0], lambda V: both(V)[1], both)


def _huber_block(Z, lam, rho):
    """min over W of ``lam |W|_1 + rho/2 ||Z - W||^2`` and its gradient in Z."""
    kappa = lam / rho
    absZ = np.abs(Z)
    inner = absZ <= kappa
    val = np.where(inner, 0.5 * rho * Z * Z, lam * absZ - 0.5 * lam * kappa)
    return float(np.sum(val)), np.clip(rho * Z, -lam, lam)


def _joint_cost(prob: _Problem, st: AdmmState, lambda_u: float, lambda_v: float) -> SmoothCost:
    """Augmented Lagrangian with the Omegas minimized out, as a function of (U, V, d).

    The point is stacked as one (p+q+1) x r matrix: U and V on their Stiefel
    manifolds, then d as an unconstrained row (the closed-form D-update that
    follows restores d >= 0). Minimizing the Omegas out turns the l1 terms
    into Huber functions, so nothing anchors the factors to the previous
    Omega; this is what lets slow joint rotations make progress.
    Constant terms ``-||Gamma||^2 / (2 rho)`` are dropped.
    """
    p = prob.basis.p
    q = prob.basis.q
    G, Up, Vp, XtY = prob.G, prob.Up, prob.Vp, prob.XtY
    rho = st.rho

    def both(W):
        U, V, D = W[:p], W[p:p + q], W[p + q]
        D2 = D * D
        GU = G @ U
        XtYV = XtY @ V
        a = np.einsum("ij,ij->j", U, GU)
        b = np.einsum("ij,ij->j", U, XtYV)
        val = 0.5 * _dot(a, D2) - _dot(b, D)
        gU = GU * D2 - XtYV * D
        gV = -(XtY.T @ U) * D
        gD = a * D - b
        if Up is not None:
            A = Up.T @ U
            h, S = _huber_block(A * D + st.Gamma_u / rho, lambda_u, rho)
            val += h
            gU = gU + Up @ (S * D)
            gD = gD + np.einsum("ij,ij->j", A, S)
        if Vp is not None:
            A = Vp.T @ V
            h, S = _huber_block(A * D + st.Gamma_v / rho, lambda_v, rho)
            val += h
            gV = gV + Vp @ (S * D)
            gD = gD + np.einsum("ij,ij->j", A, S)
        return val, np.vstack([gU, gV, gD[None, :]])

    return SmoothCost(lambda W: both(W)[0], lambda W: both(W)[1], both)


def _d_update(prob: _Problem, st: AdmmState) -> np.ndarray:
    P = prob.X @ st.U
    n = prob.n
    alpha = np.sum(P * P, axis=0) / n
    beta = np.sum(P * (prob.Y @ st.V), axis=0) / n
    c = alpha.copy()
    b = beta.copy()
    if prob.Up is not None:
        Au = prob.Up.T @ st.U
        Wu = st.Omega_u - st.Gamma_u / st.rho
        c += st.rho * np.sum(Au * Au, axis=0)
        b += st.rho * np.sum(Au * Wu, axis=0)
    if prob.Vp is not None:
        Av = prob.Vp.T @ st.V
        Wv = st.Omega_v - st.Gamma_v / st.rho
        c += st.rho * np.sum(Av * Av, axis=0)
        b += st.rho * np.sum(Av * Wv, axis=0)
    d = np.zeros_like(b)
    pos = c > 0
    d[pos] = np.maximum(0.0, b[pos] / c[pos])
    return d


def _primal_blocks(prob: _Problem, st: AdmmState):
    Ru = Rv = None
    if prob.Up is not None:
        Ru = prob.Up.T @ (st.U * st.D) - st.Omega_u
    if prob.Vp is not None:
        Rv = prob.Vp.T @ (st.V * st.D) - st.Omega_v
    return Ru, Rv


def _block_egrads(prob: _Problem, st: AdmmState):
    """Euclidean gradients of the full U- and V-block objectives."""
    U, D, V = st.U, st.D, st.V
    XU = prob.X @ U
    R = prob.Y - (XU * D) @ V.T
    gU = -(prob.X.T @ (R @ V) / prob.n) * D
    gV = -(R.T @ XU / prob.n) * D
    if prob.Up is not None:
        gU = gU + prob.Up @ ((st.Gamma_u + st.rho * (prob.Up.T @ (U * D) - st.Omega_u)) * D)
    if prob.Vp is not None:
        gV = gV + prob.Vp @ ((st.Gamma_v + st.rho * (prob.Vp.T @ (V * D) - st.Omega_v)) * D)
    return gU, gV


def _residuals(prob: _Problem, st: AdmmState):
    p, q = prob.basis.p, prob.basis.q
    r = st.D.size
    Ru, Rv = _primal_blocks(prob, st)
    eta_u = 0.0 if Ru is None else np.linalg.norm(Ru) / np.sqrt(Ru.size)
    eta_v = 0.0 if Rv is None else np.linalg.norm(Rv) / np.sqrt(Rv.size)
    gU, gV = _block_egrads(prob, st)
    stat = (0.5 * np.linalg.norm(tangent_project(st.U, gU)) / np.sqrt(p * r)
            + 0.5 * np.linalg.norm(tangent_project(st.V, gV)) / np.sqrt(q * r))
    return 0.5 * eta_u + 0.5 * eta_v, float(stat)


def u_update(state: AdmmState, X, Y, basis: SourceSpectralBasis,
             cfg: RcgConfig = RcgConfig()) -> RcgResult:
    prob = _Problem(X, Y, basis)
    return minimize(_u_cost(prob, state), state.U, cfg)


def v_update(state: AdmmState, X, Y, basis: SourceSpectralBasis,
             cfg: RcgConfig = RcgConfig()) -> RcgResult:
    prob = _Problem(X, Y, basis)
    return minimize(_v_cost(prob, state), state.V, cfg)


def d_update(state: AdmmState, X, Y, basis: SourceSpectralBasis) -> np.ndarray:
    return _d_update(_Problem(X, Y, basis), state)


def omega_update(state: AdmmState, basis: SourceSpectralBasis, lambda_u: float, lambda_v: float):
    Ou = Ov = None
    if basis.U_perp is not None:
        Ou = soft_threshold(basis.U_perp.T @ (state.U * state.D) + state.Gamma_u / state.rho,
                            lambda_u / state.rho)
    if basis.V_perp is not None:
        Ov = soft_threshold(basis.V_perp.T @ (state.V * state.D) + state.Gamma_v / state.rho,
                            lambda_v / state.rho)
    return Ou, Ov


def dual_update(state: AdmmState, basis: SourceSpectralBasis):
    Gu = Gv = None
    if basis.U_perp is not None:
        Gu = state.Gamma_u + state.rho * (basis.U_perp.T @ (state.U * state.D) - state.Omega_u)
    if basis.V_perp is not None:
        Gv = state.Gamma_v + state.rho * (basis.V_perp.T @ (state.V * state.D) - state.Omega_v)
    return Gu, Gv


def residuals(state: AdmmState, X, Y, basis: SourceSpectralBasis,
              lambda_u: float = 0.0, lambda_v: float = 0.0):
    """(primal, stationarity) residuals of the current state.

    The lambdas do not enter either quantity; they are accepted so the call
    mirrors the other block functions.
    """
    return _residuals(_Problem(X, Y, basis), state)


def augmented_lagrangian(state: AdmmState, X, Y, basis: SourceSpectralBasis,
                         lambda_u: float, lambda_v: float) -> float:
    X = as_matrix(X)
    n = X.shape[0]
    R = as_matrix(Y) - X @ state.factors.product()
    val = 0.5 / n * float(np.sum(R * R))
    for perp, M, Om, Gam, lam in ((basis.U_perp, state.U, state.Omega_u, state.Gamma_u, lambda_u),
                                  (basis.V_perp, state.V, state.Omega_v, state.Gamma_v, lambda_v)):
        if perp is None:
            continue
        res = perp.T @ (M * state.D) - Om
        val += lam * float(np.sum(np.abs(Om))) + float(np.sum(Gam * res))
        val += 0.5 * state.rho * float(np.sum(res * res))
    return val


# ------------------------------------------------------------------ driver

def initial_state(factors: SmartFactors, basis: SourceSpectralBasis, rho0: float) -> AdmmState:
    """Induced Omegas (zero primal residual) and zero duals."""
    U = np.array(factors.U, dtype=float)
    V = np.array(factors.V, dtype=float)
    D = np.maximum(np.array(factors.D, dtype=float), 0.0)
    Ou = Ov = Gu = Gv = None
    if basis.U_perp is not None:
        Ou = basis.U_perp.T @ (U * D)
        Gu = np.zeros_like(Ou)
    if basis.V_perp is not None:
        Ov = basis.V_perp.T @ (V * D)
        Gv = np.zeros_like(Ov)
    return AdmmState(U, D, V, Ou, Ov, Gu, Gv, float(rho0), 0)


def admm_step(prob: _Problem, st: AdmmState, lambda_u, lambda_v, cfg: SolverConfig):
    """One sweep U -> V -> D -> Omega -> Gamma at the current rho (rho not increased).

    Returns the new state and the number of inner solves that stalled.
    """
    stalls = 0
    p, q, r = prob.basis.p, prob.basis.q, st.D.size
    res = minimize(_u_cost(prob, st), st.U, cfg.inner_for(p, r))
    stalls += res.stalled
    st = replace(st, U=res.point)
    res = minimize(_v_cost(prob, st), st.V, cfg.inner_for(q, r))
    stalls += res.stalled
    st = replace(st, V=res.point)
    if cfg.joint_refine:
        jcfg = replace(cfg.inner_for(p + q, r), max_iters=cfg.joint_iters)
        res = minimize(_joint_cost(prob, st, lambda_u, lambda_v),
                       np.vstack([st.U, st.V, st.D[None, :]]), jcfg, row_blocks=(p, q), free_rows=1)
        stalls += res.stalled
        st = replace(st, U=res.point[:p], V=res.point[p:p + q], D=res.point[p + q].copy())
        Ou, Ov = omega_update(st, prob.basis, lambda_u, lambda_v)
        st = replace(st, Omega_u=Ou, Omega_v=Ov)
    st = replace(st, D=_d_update(prob, st))
    Ou, Ov = omega_update(st, prob.basis, lambda_u, lambda_v)
    st = replace(st, Omega_u=Ou, Omega_v=Ov)
    Gu, Gv = dual_update(st, prob.basis)
    st = replace(st, Gamma_u=Gu, Gamma_v=Gv)
    return st, stalls


def _sorted_columns(st: AdmmState) -> AdmmState:
    order = np.argsort(-st.D, kind="stable")
    take = lambda a: None if a is None else np.ascontiguousarray(a[:, order])
    return replace(st, U=take(st.U), V=take(st.V), D=st.D[order].copy(),
                   Omega_u=take(st.Omega_u), Omega_v=take(st.Omega_v),
                   Gamma_u=take(st.Gamma_u), Gamma_v=take(st.Gamma_v))


def smart_fit(X, Y, source, r: int, r_u: int, r_v: int, lambda_u: float, lambda_v: float,
              init: Optional[SmartFactors] = None, cfg: SolverConfig = SolverConfig()) -> FitReport:
    """Fit the SMART estimator with the ADMM iteration.

    `source` is either the noisy source coefficient matrix or a prebuilt
    :class:`SourceSpectralBasis` (re-truncated to ``(r_u, r_v)``). Without
    `init`, the solver starts from the rank-`r` SVD of a Lasso warm start.
    """
    if isinstance(source, SourceSpectralBasis):
        basis = source.truncate(r_u, r_v)
    else:
        basis = build_source_basis(source, r_u, r_v)
    prob = _Problem(X, Y, basis)
    p, q = basis.p, basis.q
    if not 1 <= r <= min(p, q):
        raise ValueError(f"rank r={r} must lie in [1, {min(p, q)}]")
    if lambda_u < 0 or lambda_v < 0:
        raise ValueError("penalty levels must be nonnegative")
    if init is None:
        from smart.initializers import default_warm_start
        init = default_warm_start(prob.X, prob.Y, r)
    if init.U.shape != (p, r) or init.V.shape != (q, r) or init.D.shape != (r,):
        raise ValueError(f"initial factors do not have shapes ({p},{r}), ({r},), ({q},{r})")

    st = initial_state(init, basis, cfg.rho0)
    stalls = 0
    primal = stat = np.inf
    converged = False
    while st.t < cfg.t_max:
        st, s = admm_step(prob, st, lambda_u, lambda_v, cfg)
        stalls += s
        primal, stat = _residuals(prob, st)
        st = replace(st, t=st.t + 1)
        if primal <= cfg.eps and stat <= cfg.eps:
            converged = True
            break
        st = replace(st, rho=min(st.rho * cfg.gamma_rho, RHO_MAX))
    if st.t == 0:
        primal, stat = _residuals(prob, st)
        converged = primal <= cfg.eps and stat <= cfg.eps

    st = _sorted_columns(st)
    factors = st.factors
    return FitReport(
        factors=factors,
        C_hat=factors.product(),
        Omega_u=st.Omega_u,
        Omega_v=st.Omega_v,
        Gamma_u=st.Gamma_u,
        Gamma_v=st.Gamma_v,
        primal_residual=float(primal),
        stationarity_residual=float(stat),
        iterations=st.t,
        converged=bool(converged),
        objective=smart_objective(prob.X, prob.Y, factors, basis, lambda_u, lambda_v),
        r_u=basis.r_u,
        r_v=basis.r_v,
        lambda_u=float(lambda_u),
        lambda_v=float(lambda_v),
        rho=st.rho,
        inner_stalls=stalls,
    )
