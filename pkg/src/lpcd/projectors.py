"""Activation-aware projection onto the quantization grid.

Minimizes ``||X (W_hat - W)||_F^2 = tr((W_hat - W)^T H (W_hat - W))`` over
on-grid ``W_hat`` with either a GPTQ-style column-serial solver or exhaustive
enumeration (tiny instances only).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from lpcd._linalg import SingularMatrixError
from lpcd.grid import QuantizedMatrix, QuantParams, project_direct

DEFAULT_DAMPING = 0.01
ORACLE_LIMIT = 2**20


@dataclass(frozen=True, eq=False)
class Hessian:
    """Damped Gram matrix ``X^T X + lambda I`` of a layer's input activations."""

    matrix: np.ndarray
    damping: float = 0.0
    source_tokens: int = 0

    @property
    def singular(self) -> bool:
        return not np.all(np.linalg.eigvalsh(self.matrix) > 1e-12 * max(1.0, np.abs(self.matrix).max()))

    @cached_property
    def inverse_cholesky(self) -> np.ndarray:
        """Upper Cholesky factor ``U`` of ``H^{-1}`` (``H^{-1} = U^T U``).

        Computed once and reused for every column of the layer.
        """
        try:
            L = np.linalg.cholesky(self.matrix)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "Hessian is singular; set damping_fraction > 0"
            ) from None
        Linv = np.linalg.solve(L, np.eye(L.shape[0]))
        Hinv = Linv.T @ Linv
        return np.linalg.cholesky(0.5 * (Hinv + Hinv.T)).T


def hessian(X: np.ndarray, damping_fraction: float = DEFAULT_DAMPING) -> Hessian:
    """``X^T X`` plus ``damping_fraction * mean(diag(X^T X))`` on the diagonal.

    Accepts ``(T, N)`` or batched ``(B, T, N)`` activations.
    """
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(-1, X.shape[-1])
    if X.shape[0] < 1:
        raise ValueError("need at least one token to build a Hessian")
    G = X.T @ X
    G = 0.5 * (G + G.T)
    lam = damping_fraction * float(np.mean(np.diag(G))) if damping_fraction > 0 else 0.0
    if lam > 0:
        G = G + lam * np.eye(G.shape[0])
    return Hessian(G, lam, X.shape[0])


def activation_aware_loss(W_hat: np.ndarray, W_target: np.ndarray, H: Hessian | np.ndarray) -> float:
    Hm = H.matrix if isinstance(H, Hessian) else H
    D = np.asarray(W_hat) - np.asarray(W_target)
    return float(np.sum(D * (Hm @ D)))


def _row_params(params: QuantParams, i: int, n_rows: int) -> QuantParams:
    if params.scales.shape[0] == n_rows and n_rows > 1:
        return QuantParams(
            params.scales[i : i + 1],
            params.zero_points[i : i + 1],
            params.bits,
            params.degenerate[i : i + 1],
        )
    return params


def project_activation_aware(W_target: np.ndarray, H: Hessian, params: QuantParams) -> QuantizedMatrix:
    """GPTQ: quantize input rows of ``W_target`` in order, spreading each
    row's rounding error over the remaining rows through ``H^{-1}``.

    ``W_target`` is ``(N, M)`` with ``H`` over the ``N`` input features.
    """
    W = np.array(W_target, dtype=np.float64)
    N, M = W.shape
    if H.matrix.shape != (N, N):
        raise ValueError(f"Hessian {H.matrix.shape} does not match weight {W.shape}")
    if H.damping == 0 and H.singular:
        raise SingularMatrixError("Hessian is singular; set damping_fraction > 0")
    U = H.inverse_cholesky
    codes = np.empty((N, M), dtype=np.int64)
    for i in range(N):
        p = _row_params(params, i, N)
        q = project_direct(W[i : i + 1], p)
        codes[i] = q.codes[0]
        err = (W[i] - q.dequantize()[0]) / U[i, i]
        W[i + 1 :] -= np.outer(U[i, i + 1 :], err)
    return QuantizedMatrix(codes, params)


def project_oracle(W_target: np.ndarray, H: Hessian | np.ndarray, params: QuantParams) -> QuantizedMatrix:
    """Exact minimizer by enumeration.

    The objective separates over output columns, so each column is enumerated
    on its own; ties resolve to the lexicographically smallest code vector.
    """
    W = np.asarray(W_target, dtype=np.float64)
    Hm = H.matrix if isinstance(H, Hessian) else np.asarray(H, dtype=np.float64)
    N, M = W.shape
    n_levels = params.qmax + 1
    if n_levels**N > ORACLE_LIMIT:
        raise ValueError(f"instance too large for enumeration: {n_levels}^{N} assignments per column")
    all_codes = np.array(list(itertools.product(range(n_levels), repeat=N)), dtype=np.int64)
    scales = np.broadcast_to(params.scales, W.shape)
    zps = np.broadcast_to(params.zero_points, W.shape)
    codes = np.empty((N, M), dtype=np.int64)
    for j in range(M):
        vals = scales[:, j] * (all_codes - zps[:, j])
        D = vals - W[:, j]
        losses = np.einsum("ki,ij,kj->k", D, Hm, D)
        codes[:, j] = all_codes[int(np.argmin(losses))]
    return QuantizedMatrix(codes, params)
