"""Dense linear-algebra helpers shared by the relaxation steps."""

from __future__ import annotations

import numpy as np

PINV_RTOL = 1e-10


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when an undamped Gram matrix cannot be inverted."""


def pinv(A: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse with a relative singular-value cutoff."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return np.zeros(A.shape[::-1])
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(A.shape[::-1])
    keep = s > rtol * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def lstsq(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution of ``A @ X ~= B``."""
    return pinv(A) @ B


def damp(G: np.ndarray, damping_fraction: float) -> np.ndarray:
    """Symmetrize ``G`` and add ``damping_fraction * mean(diag(G))`` to the diagonal."""
    G = 0.5 * (G + G.T)
    if damping_fraction > 0:
        lam = damping_fraction * float(np.mean(np.diag(G)))
        G = G + lam * np.eye(G.shape[0])
    return G


def solve_gram(G: np.ndarray, B: np.ndarray, damping_fraction: float = 0.0) -> np.ndarray:
    """Solve ``G X = B`` for a symmetric PSD Gram matrix ``G``.

    With ``damping_fraction == 0`` a singular ``G`` raises
    :class:`SingularMatrixError` instead of silently regularizing.
    """
    Gd = damp(np.asarray(G, dtype=np.float64), damping_fraction)
    try:
        L = np.linalg.cholesky(Gd)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(
            "Gram matrix is singular; set damping_fraction > 0"
        ) from None
    if np.min(np.diag(L)) <= 1e-12 * max(1.0, float(np.max(np.diag(L)))):
        raise SingularMatrixError("Gram matrix is numerically singular; set damping_fraction > 0")
    Y = np.linalg.solve(L, B)
    return np.linalg.solve(L.T, Y)


def sym_power(H: np.ndarray, power: float, floor: float = 0.0) -> np.ndarray:
    """``H ** power`` for symmetric ``H`` via eigendecomposition, eigenvalues floored."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.maximum(w, floor)
    if power < 0 and np.any(w <= 0):
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return (V * w**power) @ V.T
