import numpy as np
import pytest
from hypothesis import given, strategies as st

from smart.stiefel import RcgConfig, SmoothCost, minimize, retract, tangent_project

from conftest import random_orthonormal


def rayleigh(A):
    return SmoothCost(lambda M: float(np.trace(M.T @ A @ M)), lambda M: 2.0 * A @ M)


def test_project_self_is_zero(rng):
    M = random_orthonormal(rng, 4, 2)
    assert np.linalg.norm(tangent_project(M, M)) <= 1e-12


def test_project_tangent_unchanged():
    e1 = np.array([[1.0], [0.0], [0.0]])
    e2 = np.array([[0.0], [1.0], [0.0]])
    np.testing.assert_allclose(tangent_project(e1, e2), e2)


def test_project_skew(rng):
    M = random_orthonormal(rng, 5, 2)
    xi = tangent_project(M, rng.standard_normal((5, 2)))
    S = M.T @ xi
    assert np.linalg.norm(S + S.T) <= 1e-10


def test_retract_zero(rng):
    M = random_orthonormal(rng, 5, 2)
    np.testing.assert_allclose(retract(M, np.zeros_like(M)), M, atol=1e-14)


def test_retract_normalizes():
    out = retract(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
    np.testing.assert_allclose(out, np.array([[1.0], [1.0]]) / np.sqrt(2.0))


def test_retract_second_order(rng):
    M = random_orthonormal(rng, 6, 3)
    xi = tangent_project(M, rng.standard_normal((6, 3)))
    errs = []
    for h in (1e-2, 1e-3):
        R = retract(M, h * xi)
        assert np.linalg.norm(R.T @ R - np.eye(3)) <= 1e-12
        errs.append(np.linalg.norm(R - (M + h * xi)))
    # O(h^2): a tenfold smaller step shrinks the gap about a hundredfold
    assert errs[1] <= errs[0] / 50


def test_retract_ill_conditioned_falls_back(rng):
    M = random_orthonormal(rng, 6, 2)
    xi = np.zeros((6, 2))
    xi[:, 1] = 1e3 * M[:, 0]
    R = retract(M, xi)
    assert np.linalg.norm(R.T @ R - np.eye(2)) <= 1e-10


def test_minimize_stationary_start(rng):
    M0 = random_orthonormal(rng, 5, 2)
    cost = SmoothCost(lambda M: 0.5 * np.sum((M - M0) ** 2), lambda M: M - M0)
    res = minimize(cost, M0)
    assert res.iters == 0
    np.testing.assert_array_equal(res.point, M0)


def test_minimize_smallest_eigenvalue():
    res = minimize(rayleigh(np.diag([4.0, 3.0, 2.0, 1.0])), np.full((4, 1), 0.5))
    assert res.value == pytest.approx(1.0, abs=1e-6)


def test_minimize_two_smallest(rng):
    B = rng.standard_normal((5, 5))
    A = B + B.T
    res = minimize(rayleigh(A), random_orthonormal(rng, 5, 2), RcgConfig(max_iters=2000))
    ev = np.linalg.eigvalsh(A)
    assert res.value == pytest.approx(ev[0] + ev[1], abs=1e-6)


@given(st.integers(0, 10_000), st.sampled_from([(6, 1), (8, 2), (12, 3), (20, 4)]))
def test_rayleigh_subspace(seed, shape):
    rng = np.random.default_rng(seed)
    m, k = shape
    # well separated spectrum so the subspace is determined
    ev = np.concatenate([np.arange(1, k + 1), np.arange(k + 3, m + 3)]).astype(float)
    Q = random_orthonormal(rng, m, m)
    A = (Q * ev) @ Q.T
    res = minimize(rayleigh(A), random_orthonormal(rng, m, k), RcgConfig(max_iters=3000))
    M = res.point
    assert np.linalg.norm(M.T @ M - np.eye(k)) <= 1e-8
    cosines = np.linalg.svd(Q[:, :k].T @ M, compute_uv=False)
    assert np.max(np.arccos(np.clip(cosines, -1, 1))) <= 1e-4


def test_iterates_feasible_and_descending(rng):
    B = rng.standard_normal((7, 7))
    A = B + B.T
    values, feas = [], []

    def value(M):
        return float(np.trace(M.T @ A @ M))

    def both(M):
        feas.append(np.linalg.norm(M.T @ M - np.eye(2)))
        return value(M), 2 * A @ M

    x = random_orthonormal(rng, 7, 2)
    for _ in range(15):
        res = minimize(SmoothCost(value, lambda M: 2 * A @ M, both), x, RcgConfig(max_iters=1))
        values.append(res.value)
        x = res.point
    assert max(feas) <= 1e-8
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def test_gradient_matches_finite_difference(rng):
    B = rng.standard_normal((6, 6))
    A = B + B.T
    M = random_orthonormal(rng, 6, 2)
    xi = tangent_project(M, rng.standard_normal((6, 2)))
    f = rayleigh(A).value
    h = 1e-6
    fd = (f(retract(M, h * xi)) - f(retract(M, -h * xi))) / (2 * h)
    g = tangent_project(M, 2 * A @ M)
    assert fd == pytest.approx(float(np.vdot(g, xi)), rel=1e-5)


def test_product_manifold_with_free_row(rng):
    # stacked (U, V, d): U, V stay orthonormal, d moves freely
    U = random_orthonormal(rng, 4, 2)
    V = random_orthonormal(rng, 3, 2)
    target = np.array([2.0, -1.0])

    def both(W):
        d = W[-1]
        return 0.5 * float(np.sum((d - target) ** 2)), np.vstack([np.zeros((7, 2)), (d - target)[None]])

    cost = SmoothCost(lambda W: both(W)[0], lambda W: both(W)[1], both)
    res = minimize(cost, np.vstack([U, V, np.zeros((1, 2))]), row_blocks=(4, 3), free_rows=1)
    np.testing.assert_allclose(res.point[-1], target, atol=1e-7)
    np.testing.assert_allclose(res.point[:4], U)


def test_config_validation():
    with pytest.raises(ValueError):
        RcgConfig(backtrack=1.5)
    with pytest.raises(ValueError):
        RcgConfig(grad_tol=0)
