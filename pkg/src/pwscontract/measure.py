"""Weighted matrix measure (logarithmic norm) and the small dense symmetric
linear algebra it needs: Cholesky factorization, closed-form 2x2 eigenvalues,
and a cyclic Jacobi eigensolver for larger matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Metric", "sym_eig_max", "is_positive_definite", "matrix_measure"]

_JACOBI_SWEEPS = 50
_JACOBI_OFF_TOL = 1e-14
_SYM_TOL = 1e-12
_COND_LIMIT = 1e12


def _as_square(M, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {M.shape}")
    return M


def _is_symmetric(S: np.ndarray) -> bool:
    scale = max(float(np.linalg.norm(S)), 1.0)
    return float(np.linalg.norm(S - S.T)) <= _SYM_TOL * scale


def _cholesky_lower(Q: np.ndarray):
    """Lower Cholesky factor of Q, or None if a pivot is not positive."""
    n = Q.shape[0]
    L = np.zeros_like(Q)
    for j in range(n):
        d = Q[j, j] - float(np.dot(L[j, :j], L[j, :j]))
        if d <= 0.0 or not math.isfinite(d):
            return None
        L[j, j] = math.sqrt(d)
        if j + 1 < n:
            L[j + 1 :, j] = (Q[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def _lower_inverse(L: np.ndarray) -> np.ndarray:
    n = L.shape[0]
    X = np.zeros_like(L)
    for j in range(n):
        X[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            X[i, j] = -float(np.dot(L[i, j:i], X[j:i, j])) / L[i, i]
    return X


def _jacobi_eigenvalues(S: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    A = 0.5 * (S + S.T)
    n = A.shape[0]
    fro = float(np.linalg.norm(A))
    if fro == 0.0:
        return np.zeros(n)
    thresh = _JACOBI_OFF_TOL * fro
    for _ in range(_JACOBI_SWEEPS):
        off = math.sqrt(2.0 * float(np.sum(np.tril(A, -1) ** 2)))
        if off <= thresh:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= thresh / (n * n):
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.hypot(1.0, t)
                s = t * c
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp = A[:, p].copy()
                cq = A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
    return np.diag(A).copy()


def sym_eig_max(S) -> float:
    """Largest eigenvalue of a symmetric matrix.

    Uses the closed form for n <= 2 and cyclic Jacobi iteration above that.
    Raises ValueError if S is not symmetric within 1e-12 relative tolerance.
    """
    S = _as_square(S, "S")
    if not _is_symmetric(S):
        raise ValueError("matrix is not symmetric within tolerance")
    n = S.shape[0]
    if n == 1:
        return float(S[0, 0])
    if n == 2:
        a, c = S[0, 0], S[1, 1]
        b = 0.5 * (S[0, 1] + S[1, 0])
        return float(0.5 * (a + c) + math.hypot(0.5 * (a - c), b))
    return float(np.max(_jacobi_eigenvalues(S)))


def is_positive_definite(Q) -> bool:
    """True iff Q is symmetric and all Cholesky pivots are positive."""
    Q = _as_square(Q, "Q")
    if not _is_symmetric(Q):
        return False
    return _cholesky_lower(0.5 * (Q + Q.T)) is not None


def matrix_measure(Q, A) -> float:
    """Matrix measure mu_Q(A) = lambda_max((Q A Q^-1 + Q^-1 A^T Q) / 2).

    Q must be symmetric positive definite; Q^-1 is formed from the Cholesky
    factor. With Q = I this reduces to lambda_max((A + A^T) / 2).
    Raises ValueError for non-PD Q or condition estimate above 1e12.
    """
    Q = _as_square(Q, "Q")
    A = _as_square(A, "A")
    if Q.shape != A.shape:
        raise ValueError(f"shape mismatch: Q {Q.shape} vs A {A.shape}")
    if not _is_symmetric(Q):
        raise ValueError("Q must be symmetric positive definite")
    Qs = 0.5 * (Q + Q.T)
    L = _cholesky_lower(Qs)
    if L is None:
        raise ValueError("Q must be symmetric positive definite")
    lam_hi = sym_eig_max(Qs)
    lam_lo = -sym_eig_max(-Qs)
    if lam_lo <= 0.0 or lam_hi / lam_lo > _COND_LIMIT:
        raise ValueError("Q is singular or too ill-conditioned (cond > 1e12)")
    Linv = _lower_inverse(L)
    Qinv = Linv.T @ Linv
    S = Qs @ A @ Qinv
    S = 0.5 * (S + S.T)
    return sym_eig_max(S)


@dataclass(frozen=True)
class Metric:
    """Contraction certificate candidate: a PD weight matrix Q and a rate c >= 0."""

    Q: np.ndarray
    c: float

    def __post_init__(self):
        Q = _as_square(self.Q, "Q").copy()
        Q.flags.writeable = False
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", float(self.c))
        if not is_positive_definite(Q):
            raise ValueError("metric Q must be symmetric positive definite")
        if self.c < 0.0:
            raise ValueError("contraction rate c must be nonnegative")

    @classmethod
    def identity(cls, n: int, c: float) -> "Metric":
        return cls(np.eye(n), c)

    @property
    def dimension(self) -> int:
        return int(self.Q.shape[0])

    def measure(self, A) -> float:
        return matrix_measure(self.Q, A)

    def weighted_norm(self, v) -> float:
        """||Q v||_2, the distance weight used in the pairwise decay test."""
        return float(np.linalg.norm(self.Q @ np.asarray(v, dtype=float)))

    def cond(self) -> float:
        lam_hi = sym_eig_max(self.Q)
        lam_lo = -sym_eig_max(-self.Q)
        return float(lam_hi / lam_lo)
