"""Dense linear-algebra kernels with fixed ordering and sign conventions.

Matrices are plain 2-D ``float64`` numpy arrays throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericalError(RuntimeError):
    """An underlying factorization failed to converge."""


class RankDeficientError(ValueError):
    """A matrix expected to have full column rank does not."""


def as_matrix(A, name: str = "matrix") -> np.ndarray:
    """Return `A` as a finite 2-D float64 array, raising ValueError otherwise."""
    M = np.asarray(A, dtype=np.float64)
    if M.ndim == 1:
        M = M.reshape(-1, 1)
    if M.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


@dataclass(frozen=True)
class SvdTriple:
    U: np.ndarray
    d: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.d) @ self.V.T


def _fix_signs(U: np.ndarray, V: np.ndarray) -> None:
    # largest-|.| entry of each left vector positive; argmax picks the lowest index on ties
    if U.shape[1] == 0:
        return
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    U *= s
    V *= s


def svd(A) -> SvdTriple:
    """Thin SVD with descending singular values and a deterministic sign convention.

    Within every left singular vector the entry of largest magnitude is made
    positive (lowest index wins ties); the matching right vector is flipped
    with it so the product is unchanged.
    """
    A = as_matrix(A)
    try:
        U, d, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    order = np.argsort(-d, kind="stable")
    U = np.ascontiguousarray(U[:, order])
    V = np.ascontiguousarray(Vt[order].T)
    d = d[order]
    _fix_signs(U, V)
    return SvdTriple(U, d, V)


def qr_orthonormalize(A) -> np.ndarray:
    """Orthonormal basis of col(A) from a QR factorization with positive diag(R)."""
    A = as_matrix(A)
    m, k = A.shape
    if k > m:
        raise RankDeficientError(f"cannot orthonormalize {k} columns in R^{m}")
    Q, R = np.linalg.qr(A)
    diag = np.diag(R)
    scale = np.linalg.norm(A)
    if k and np.min(np.abs(diag)) <= 1e-12 * max(scale, np.finfo(float).tiny):
        raise RankDeficientError("matrix is numerically rank deficient")
    s = np.sign(diag)
    return Q * s


def complete_basis(U0, tol: float = 1e-8) -> np.ndarray:
    """Deterministic orthonormal complement of the orthonormal columns `U0`.

    Standard basis vectors are taken in index order and Gram-Schmidt
    orthogonalized (two passes) against every accepted column; a candidate is
    kept when its residual norm exceeds `tol`.
    """
    U0 = np.asarray(U0, dtype=np.float64)
    p, k = U0.shape
    need = p - k
    W = np.zeros((p, need))
    if need == 0:
        return W
    basis = np.zeros((p, p))
    basis[:, :k] = U0
    filled = k
    for i in range(p):
        v = np.zeros(p)
        v[i] = 1.0
        B = basis[:, :filled]
        for _ in range(2):
            v -= B @ (B.T @ v)
        nrm = np.linalg.norm(v)
        if nrm > tol:
            basis[:, filled] = v / nrm
            filled += 1
            if filled == p:
                break
    if filled < p:
        raise RuntimeError(f"basis completion accepted {filled - k} of {need} columns")
    return np.ascontiguousarray(basis[:, k:])


def soft_threshold(A, kappa: float) -> np.ndarray:
    """Entrywise proximal map of ``kappa * |.|``."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    A = np.asarray(A, dtype=np.float64)
    return np.sign(A) * np.maximum(np.abs(A) - kappa, 0.0)
