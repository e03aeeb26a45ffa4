from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smart.linalg import svd
from smart.solver import (AdmmState, SmartFactors, SolverConfig, _Problem, _u_cost, _v_cost,
                          admm_step, augmented_lagrangian, build_source_basis, d_update,
                          dual_update, initial_state, omega_update, residuals, smart_fit,
                          smart_objective, u_update, v_update)
from smart.stiefel import RcgConfig, retract, tangent_project

from conftest import random_orthonormal


def random_state(rng, p=5, q=4, r=2, r_u=2, r_v=1, n=8, rho=1.7):
    X = rng.standard_normal((n, p))
    Y = rng.standard_normal((n, q))
    basis = build_source_basis(rng.standard_normal((p, q)), r_u, r_v)
    U, V = random_orthonormal(rng, p, r), random_orthonormal(rng, q, r)
    D = rng.uniform(0.5, 2.0, r)
    Ou = rng.standard_normal((p - r_u, r)) if r_u < p else None
    Ov = rng.standard_normal((q - r_v, r)) if r_v < q else None
    Gu = rng.standard_normal((p - r_u, r)) if r_u < p else None
    Gv = rng.standard_normal((q - r_v, r)) if r_v < q else None
    return X, Y, basis, AdmmState(U, D, V, Ou, Ov, Gu, Gv, rho)


# ------------------------------------------------------------ source basis

def test_basis_of_zero_source():
    b = build_source_basis(np.zeros((3, 2)), 0, 0)
    np.testing.assert_array_equal(b.U_full, np.eye(3))
    np.testing.assert_array_equal(b.V_full, np.eye(2))
    assert b.r0_tilde == 0


def test_basis_rank_one():
    C = np.zeros((3, 3))
    C[0, 0] = 1.0
    b = build_source_basis(C, 1, 1)
    np.testing.assert_allclose(b.U_full[:, 0], [1.0, 0.0, 0.0])
    assert b.r0_tilde == 1


@pytest.mark.parametrize("r_u", [0, 3, 10])
def test_basis_orthogonal(rng, r_u):
    C = rng.standard_normal((10, 6))
    b = build_source_basis(C, r_u, min(r_u, 6))
    for full in (b.U_full, b.V_full):
        assert np.linalg.norm(full.T @ full - np.eye(full.shape[0])) <= 1e-10
    B = np.hstack([b.U_s, b.U_full[:, r_u:]])
    assert np.linalg.norm(B.T @ B - np.eye(10)) <= 1e-10
    assert (b.U_perp is None) == (r_u == 10)
    np.testing.assert_allclose(b.U_full[:, :6], svd(C).U, atol=1e-12)


def test_basis_rejects_bad_truncation():
    with pytest.raises(ValueError):
        build_source_basis(np.ones((3, 2)), 4, 0)


# ------------------------------------------------------------- objective

def test_objective_exact_fit(rng):
    X = rng.standard_normal((6, 4))
    f = SmartFactors(random_orthonormal(rng, 4, 2), np.array([2.0, 1.0]),
                     random_orthonormal(rng, 3, 2))
    Y = X @ f.product()
    b = build_source_basis(rng.standard_normal((4, 3)), 1, 1)
    assert smart_objective(X, Y, f, b, 0.0, 0.0) == pytest.approx(0.0, abs=1e-24)


def test_objective_zero_factor(rng):
    X, Y = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    f = SmartFactors(random_orthonormal(rng, 4, 2), np.zeros(2), random_orthonormal(rng, 3, 2))
    b = build_source_basis(rng.standard_normal((4, 3)), 1, 1)
    assert smart_objective(X, Y, f, b, 3.0, 5.0) == pytest.approx(np.sum(Y ** 2) / 12)


def test_objective_term_by_term(rng):
    n, p, q = 4, 3, 2
    X, Y = rng.standard_normal((n, p)), rng.standard_normal((n, q))
    C0 = rng.standard_normal((p, q))
    b = build_source_basis(C0, 1, 1)
    u, v, d = random_orthonormal(rng, p, 1), random_orthonormal(rng, q, 1), 1.3
    f = SmartFactors(u, np.array([d]), v)
    loss = sum((Y[i, j] - d * sum(X[i, k] * u[k, 0] for k in range(p)) * v[j, 0]) ** 2
               for i in range(n) for j in range(q)) / (2 * n)
    pen_u = sum(abs(d * float(b.U_full[:, k] @ u[:, 0])) for k in range(1, p))
    pen_v = sum(abs(d * float(b.V_full[:, k] @ v[:, 0])) for k in range(1, q))
    expected = loss + 0.2 * pen_u + 0.7 * pen_v
    assert smart_objective(X, Y, f, b, 0.2, 0.7) == pytest.approx(expected, rel=1e-12)


# --------------------------------------------------------------- U block

def test_u_update_flat_cost_returns_init(rng):
    X, Y, b, st_ = random_state(rng)
    st_ = replace(st_, D=np.zeros(2), Omega_u=np.zeros_like(st_.Omega_u),
                  Gamma_u=np.zeros_like(st_.Gamma_u))
    res = u_update(st_, X, Y, b)
    np.testing.assert_array_equal(res.point, st_.U)


def test_u_update_beats_random_points(rng):
    p = r = 3
    X, Y = rng.standard_normal((10, p)), rng.standard_normal((10, 4))
    b = build_source_basis(rng.standard_normal((p, 4)), p, 4)
    st_ = AdmmState(random_orthonormal(rng, p, r), np.array([2.0, 1.0, 0.5]),
                    random_orthonormal(rng, 4, r), None, None, None, None, 1.0)
    n = X.shape[0]
    Bu = -(X.T @ Y @ st_.V * st_.D) / n

    def f(U):
        return 0.5 / n * np.sum((X @ U * st_.D) ** 2) + np.trace(U.T @ Bu)

    res = u_update(st_, X, Y, b, RcgConfig(max_iters=2000))
    best = f(res.point)
    assert best == pytest.approx(res.value, abs=1e-10)
    for _ in range(100):
        assert best <= f(random_orthonormal(rng, p, r)) + 1e-10


@pytest.mark.parametrize("block", ["u", "v"])
def test_block_gradient_finite_difference(rng, block):
    X, Y, b, st_ = random_state(rng)
    prob = _Problem(X, Y, b)
    cost = _u_cost(prob, st_) if block == "u" else _v_cost(prob, st_)
    M = st_.U if block == "u" else st_.V
    xi = tangent_project(M, rng.standard_normal(M.shape))
    h = 1e-6
    fd = (cost.value(retract(M, h * xi)) - cost.value(retract(M, -h * xi))) / (2 * h)
    an = float(np.vdot(tangent_project(M, cost.egrad(M)), xi))
    assert abs(fd - an) <= 1e-4 * max(1.0, abs(an))


# --------------------------------------------------------------- V block

def test_v_update_flat_cost_returns_init(rng):
    X, Y, b, st_ = random_state(rng, r_v=4)
    st_ = replace(st_, D=np.zeros(2), Omega_v=None, Gamma_v=None)
    res = v_update(st_, X, Y, b)
    np.testing.assert_array_equal(res.point, st_.V)


def test_v_update_procrustes(rng):
    q, r = 4, 2
    X, Y = rng.standard_normal((7, 3)), rng.standard_normal((7, q))
    b = build_source_basis(rng.standard_normal((3, q)), 3, q)
    st_ = AdmmState(random_orthonormal(rng, 3, r), np.ones(r), random_orthonormal(rng, q, r),
                    None, None, None, None, 1.0)
    Bv = -(Y.T @ X @ st_.U) / 7
    W1, s, W2t = np.linalg.svd(Bv, full_matrices=False)
    res = v_update(st_, X, Y, b, RcgConfig(max_iters=2000))
    assert res.value == pytest.approx(-np.sum(s), abs=1e-6)
    np.testing.assert_allclose(res.point, -W1 @ W2t, atol=1e-5)


# --------------------------------------------------------------- D block

def test_d_update_scalar():
    b = build_source_basis(np.ones((1, 1)), 1, 1)
    st_ = AdmmState(np.ones((1, 1)), np.array([0.3]), np.ones((1, 1)), None, None, None, None, 1.0)
    assert d_update(st_, [[1.0]], [[2.0]], b) == pytest.approx([2.0])
    assert d_update(st_, [[1.0]], [[-2.0]], b) == pytest.approx([0.0])


def test_d_update_grid_search(rng):
    X, Y, b, st_ = random_state(rng, p=5, q=4, r=2, n=6)
    d = d_update(st_, X, Y, b)
    assert np.all(d >= 0)

    def al(D):
        return augmented_lagrangian(replace(st_, D=D), X, Y, b, 0.0, 0.0)

    for k in range(2):
        # the subproblem is an exact quadratic in d_k; recover it from three evaluations
        def at(t):
            D = d.copy()
            D[k] = t
            return al(D)
        f0, f1, f2 = at(0.0), at(1.0), at(2.0)
        a2 = (f2 - 2 * f1 + f0) / 2
        a1 = f1 - f0 - a2
        hi = 2 * abs(a1 / (2 * a2)) + 1e-3
        grid = np.arange(0.0, hi, 1e-5)
        best = grid[np.argmin(a2 * grid ** 2 + a1 * grid)]
        assert d[k] == pytest.approx(best, abs=1e-4)


# ----------------------------------------------------------- Omega block

def test_omega_update_no_penalty(rng):
    X, Y, b, st_ = random_state(rng)
    Ou, Ov = omega_update(st_, b, 0.0, 0.0)
    np.testing.assert_array_equal(Ou, b.U_perp.T @ (st_.U * st_.D) + st_.Gamma_u / st_.rho)


def test_omega_update_large_penalty(rng):
    X, Y, b, st_ = random_state(rng)
    Ou, Ov = omega_update(st_, b, 1e6, 1e6)
    assert not Ou.any() and not Ov.any()


def test_omega_update_prox_oracle(rng):
    X, Y, b, st_ = random_state(rng)
    lam_u, lam_v = 0.8, 1.5
    Ou, Ov = omega_update(st_, b, lam_u, lam_v)
    grid = np.arange(-8.0, 8.0, 1e-4)
    for perp, M, Gam, lam, Om in ((b.U_perp, st_.U, st_.Gamma_u, lam_u, Ou),
                                  (b.V_perp, st_.V, st_.Gamma_v, lam_v, Ov)):
        m = perp.T @ (M * st_.D)
        for (i, j), val in np.ndenumerate(Om):
            obj = lam * np.abs(grid) + Gam[i, j] * (m[i, j] - grid) \
                + 0.5 * st_.rho * (m[i, j] - grid) ** 2
            assert val == pytest.approx(grid[np.argmin(obj)], abs=1e-4)


def test_omega_absent_blocks(rng):
    X, Y, b, st_ = random_state(rng, r_u=5, r_v=4)
    st_ = replace(st_, Omega_u=None, Omega_v=None, Gamma_u=None, Gamma_v=None)
    assert omega_update(st_, b, 1.0, 1.0) == (None, None)


# ------------------------------------------------------------ dual block

def test_dual_unchanged_at_zero_residual(rng):
    X, Y, b, st_ = random_state(rng)
    st0 = initial_state(st_.factors, b, 1.0)
    st0 = replace(st0, Gamma_u=st_.Gamma_u, Gamma_v=st_.Gamma_v)
    Gu, Gv = dual_update(st0, b)
    np.testing.assert_allclose(Gu, st_.Gamma_u, atol=1e-14)
    np.testing.assert_allclose(Gv, st_.Gamma_v, atol=1e-14)


def test_dual_formula(rng):
    X, Y, b, st_ = random_state(rng)
    Ru = b.U_perp.T @ (st_.U * st_.D) - st_.Omega_u
    z = replace(st_, Gamma_u=np.zeros_like(st_.Gamma_u), rho=2.0)
    np.testing.assert_allclose(dual_update(z, b)[0], 2 * Ru, atol=1e-14)
    Gu, Gv = dual_update(st_, b)
    Rv = b.V_perp.T @ (st_.V * st_.D) - st_.Omega_v
    np.testing.assert_allclose(Gu - st_.Gamma_u, st_.rho * Ru, atol=1e-12)
    np.testing.assert_allclose(Gv - st_.Gamma_v, st_.rho * Rv, atol=1e-12)


# ------------------------------------------------------------- residuals

def test_residuals_zero_at_exact_fit(rng):
    n, p, q = 6, 4, 3
    X = rng.standard_normal((n, p))
    f = SmartFactors(random_orthonormal(rng, p, 2), np.array([2.0, 1.0]),
                     random_orthonormal(rng, q, 2))
    b = build_source_basis(rng.standard_normal((p, q)), 1, 1)
    st_ = initial_state(f, b, 3.0)
    primal, stat = residuals(st_, X, X @ f.product(), b)
    assert primal == pytest.approx(0.0, abs=1e-14)
    assert stat == pytest.approx(0.0, abs=1e-12)


def test_residuals_no_primal_without_blocks(rng):
    X, Y, b, st_ = random_state(rng, r_u=5, r_v=4)
    st_ = replace(st_, Omega_u=None, Omega_v=None, Gamma_u=None, Gamma_v=None)
    assert residuals(st_, X, Y, b)[0] == 0.0


def test_residuals_recomputed(rng):
    X, Y, b, st_ = random_state(rng)
    n, p = X.shape
    q, r = Y.shape[1], st_.D.size
    U, V, D, rho = st_.U, st_.V, st_.D, st_.rho
    R = Y - X @ U @ np.diag(D) @ V.T
    Pu, Pv = b.U_full[:, 2:], b.V_full[:, 1:]
    Ru = Pu.T @ U @ np.diag(D) - st_.Omega_u
    Rv = Pv.T @ V @ np.diag(D) - st_.Omega_v
    gU = -X.T @ R @ V @ np.diag(D) / n + Pu @ (st_.Gamma_u + rho * Ru) @ np.diag(D)
    gV = -R.T @ X @ U @ np.diag(D) / n + Pv @ (st_.Gamma_v + rho * Rv) @ np.diag(D)
    stat = 0.5 * np.linalg.norm(tangent_project(U, gU)) / np.sqrt(p * r) \
        + 0.5 * np.linalg.norm(tangent_project(V, gV)) / np.sqrt(q * r)
    primal = 0.5 * np.linalg.norm(Ru) / np.sqrt(Ru.size) + 0.5 * np.linalg.norm(Rv) / np.sqrt(Rv.size)
    got = residuals(st_, X, Y, b)
    assert got[0] == pytest.approx(primal, abs=1e-12)
    assert got[1] == pytest.approx(stat, abs=1e-10)


# ------------------------------------------------------------ full solver

def test_fit_zero_signal(rng):
    X = rng.standard_normal((20, 5))
    fit = smart_fit(X, np.zeros((20, 4)), rng.standard_normal((5, 4)), 2, 1, 1, 0.0, 0.0)
    assert np.linalg.norm(fit.C_hat) <= 1e-6
    assert fit.objective <= 1e-10


def tiny_noiseless(seed=0, n=50, p=6, q=4):
    rng = np.random.default_rng(seed)
    C0 = rng.standard_normal((p, q))
    t = svd(C0)
    C_star = 2.0 * np.outer(t.U[:, 0], t.V[:, 0])
    X = rng.standard_normal((n, p))
    return X, X @ C_star, C0, C_star


def test_exact_recovery_tiny():
    X, Y, C0, C_star = tiny_noiseless()
    fit = smart_fit(X, Y, C0, 1, 0, 0, 1e-3, 1e-3)
    assert np.linalg.norm(fit.C_hat - C_star) / np.linalg.norm(C_star) <= 1e-2


def test_penalty_free_matches_eckart_young(rng):
    p, q, r = 6, 5, 2
    Y = rng.standard_normal((p, q))
    fit = smart_fit(np.eye(p), Y, rng.standard_normal((p, q)), r, p, q, 3.0, 3.0,
                    cfg=SolverConfig(eps=1e-8))
    s = np.linalg.svd(Y, compute_uv=False)
    assert fit.penalty_free and fit.Omega_u is None and fit.Gamma_v is None
    assert fit.objective == pytest.approx(0.5 / p * np.sum(s[r:] ** 2), abs=1e-6)


def test_fit_feasible_and_soft_threshold_optimal():
    rng = np.random.default_rng(5)
    X, Y, C0, _ = tiny_noiseless(3)
    Y = Y + 0.1 * rng.standard_normal(Y.shape)
    lam = 0.05
    fit = smart_fit(X, Y, C0, 2, 1, 1, lam, lam)
    assert fit.converged
    assert fit.orthogonality_error() <= 1e-6
    assert np.all(fit.factors.D >= 0)
    assert np.all(np.diff(fit.factors.D) <= 0)
    for Om, Gam in ((fit.Omega_u, fit.Gamma_u), (fit.Omega_v, fit.Gamma_v)):
        zero = Om == 0
        assert np.all(np.abs(Gam[zero]) <= lam + 1e-6)
        np.testing.assert_allclose(Gam[~zero], lam * np.sign(Om[~zero]), atol=1e-6)


def test_block_sweep_does_not_increase_lagrangian():
    rng = np.random.default_rng(11)
    X, Y, C0, _ = tiny_noiseless(4)
    Y = Y + 0.2 * rng.standard_normal(Y.shape)
    b = build_source_basis(C0, 1, 1)
    from smart.initializers import default_warm_start
    st_ = initial_state(default_warm_start(X, Y, 2), b, 1.0)
    prob = _Problem(X, Y, b)
    cfg = SolverConfig()
    for _ in range(8):
        before = augmented_lagrangian(st_, X, Y, b, 0.1, 0.1)
        new, _ = admm_step(prob, st_, 0.1, 0.1, cfg)
        # the sweep is measured at the old multipliers, before the dual ascent
        swept = replace(new, Gamma_u=st_.Gamma_u, Gamma_v=st_.Gamma_v)
        assert augmented_lagrangian(swept, X, Y, b, 0.1, 0.1) <= before + 1e-8
        st_ = replace(new, rho=new.rho * cfg.gamma_rho)


def test_column_permutation_invariance():
    rng = np.random.default_rng(2)
    X, Y, C0, _ = tiny_noiseless(6)
    Y = Y + 0.05 * rng.standard_normal(Y.shape)
    from smart.initializers import default_warm_start
    init = default_warm_start(X, Y, 2)
    perm = SmartFactors(init.U[:, ::-1].copy(), init.D[::-1].copy(), init.V[:, ::-1].copy())
    # QR retractions are not column-equivariant, so agreement is up to the stopping tolerance
    cfg = SolverConfig(eps=1e-8)
    a = smart_fit(X, Y, C0, 2, 1, 1, 0.05, 0.05, init=init, cfg=cfg)
    b = smart_fit(X, Y, C0, 2, 1, 1, 0.05, 0.05, init=perm, cfg=cfg)
    assert a.converged and b.converged
    np.testing.assert_allclose(a.C_hat, b.C_hat, atol=1e-6)


def test_fit_validates_inputs(rng):
    X, Y, C0, _ = tiny_noiseless()
    with pytest.raises(ValueError):
        smart_fit(X, Y[:10], C0, 1, 0, 0, 0.1, 0.1)
    with pytest.raises(ValueError):
        smart_fit(X, Y, C0, 5, 0, 0, 0.1, 0.1)
    with pytest.raises(ValueError):
        smart_fit(X, Y, C0, 1, 0, 0, -0.1, 0.1)
    with pytest.raises(ValueError):
        SolverConfig(gamma_rho=1.0)


@given(st.integers(0, 1000))
def test_fit_deterministic(seed):
    X, Y, C0, _ = tiny_noiseless(seed % 7, n=20)
    a = smart_fit(X, Y, C0, 1, 1, 1, 0.05, 0.05, cfg=SolverConfig(t_max=5))
    b = smart_fit(X, Y, C0, 1, 1, 1, 0.05, 0.05, cfg=SolverConfig(t_max=5))
    assert np.array_equal(a.C_hat, b.C_hat)
