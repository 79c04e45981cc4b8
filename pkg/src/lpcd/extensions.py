"""Single-step updates for activation, KV-cache, rotation, and low-rank blocks.

Every update is a closed-form relaxation followed by the projection that
matches the block's constraint: grid rounding for activations and caches,
nearest orthogonal matrix for rotations, and the Hessian-weighted best rank-r
approximation for low-rank corrections.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from lpcd._linalg import pinv, solve_gram, sym_power
from lpcd.grid import QuantizedMatrix, QuantScheme, fit_scheme, project_direct


def qep_activation_relax(X: np.ndarray, W: np.ndarray, W_hat: np.ndarray) -> np.ndarray:
    """Minimum-norm ``argmin_U ||U W_hat - X W||^2 = X W W_hat^T (W_hat W_hat^T)^+``."""
    X, W, Wh = (np.asarray(a, dtype=np.float64) for a in (X, W, W_hat))
    return X @ W @ Wh.T @ pinv(Wh @ Wh.T)


def kv_key_relax(
    K: np.ndarray, Q: np.ndarray, Q_hat: np.ndarray, alpha_K: float, damping_fraction: float = 0.0
) -> np.ndarray:
    """Keys that best reproduce the pre-softmax logits ``Q K^T`` from ``Q_hat``:
    ``K (I + alpha_K H_Q^{-1} C_Q)^T``."""
    K, Q, Qh = (np.asarray(a, dtype=np.float64) for a in (K, Q, Q_hat))
    if alpha_K == 0:
        return K.copy()
    H = Qh.T @ Qh
    C = Qh.T @ (Q - Qh)
    return K + alpha_K * K @ solve_gram(H, C, damping_fraction).T


def kv_value_relax(
    V: np.ndarray, A: np.ndarray, A_hat: np.ndarray, alpha_V: float, damping_fraction: float = 0.0
) -> np.ndarray:
    """Values that best reproduce ``A V`` through the quantized attention
    weights: ``(I + alpha_V H_A^{-1} C_A) V``."""
    V, A, Ah = (np.asarray(a, dtype=np.float64) for a in (V, A, A_hat))
    if alpha_V == 0:
        return V.copy()
    H = Ah.T @ Ah
    C = Ah.T @ (A - Ah)
    return V + alpha_V * solve_gram(H, C @ V, damping_fraction)


def kv_project(
    cache: np.ndarray,
    scheme: Literal["per_channel", "per_token"],
    bits: int = 4,
    mode: Literal["symmetric", "asymmetric"] = "asymmetric",
) -> QuantizedMatrix:
    """Round a ``(tokens, dim)`` cache with one grid per feature or per token."""
    if scheme not in ("per_channel", "per_token"):
        raise ValueError(f"unknown KV granularity {scheme!r}")
    qs = QuantScheme(bits, "per_channel", mode, channel_axis=1 if scheme == "per_channel" else 0)
    return project_direct(cache, fit_scheme(cache, qs))


# ---------------------------------------------------------------- rotation


@dataclass(frozen=True, eq=False)
class RotationBlock:
    """Normal-equation data for the rotation block."""

    H_R: np.ndarray
    B_R: np.ndarray
    lambdas: tuple[float, float]

    @classmethod
    def build(cls, X, X_hat, W, W_hat, lambdas=(1.0, 1.0)) -> RotationBlock:
        la, lw = lambdas
        if la < 0 or lw < 0:
            raise ValueError("lambdas must be nonnegative")
        X, Xh, W, Wh = (np.asarray(a, dtype=np.float64) for a in (X, X_hat, W, W_hat))
        return cls(la * X.T @ X + lw * W @ W.T, la * X.T @ Xh + lw * W @ Wh.T, (la, lw))


def rotation_loss(R, X, X_hat, W, W_hat, lambdas=(1.0, 1.0)) -> float:
    la, lw = lambdas
    return float(la * np.sum((X @ R - X_hat) ** 2) + lw * np.sum((R.T @ W - W_hat) ** 2))


def rotation_grad(R, X, X_hat, W, W_hat, lambdas=(1.0, 1.0)) -> np.ndarray:
    la, lw = lambdas
    return 2 * la * X.T @ (X @ R - X_hat) + 2 * lw * (W @ W.T @ R - W @ W_hat.T)


def rotation_relax(X, X_hat, W, W_hat, lambdas=(1.0, 1.0), damping_fraction: float = 0.0) -> np.ndarray:
    """Solve ``H_R R = B_R`` (the unconstrained rotation least squares)."""
    blk = RotationBlock.build(X, X_hat, W, W_hat, lambdas)
    return solve_gram(blk.H_R, blk.B_R, damping_fraction)


def rotation_project(R_bar: np.ndarray, proper: bool = False) -> np.ndarray:
    """Nearest orthogonal matrix ``U V^T`` in Frobenius norm.

    With ``proper=True`` the last left singular vector is flipped when needed
    so that ``det = +1``.
    """
    U, _, Vt = np.linalg.svd(np.asarray(R_bar, dtype=np.float64))
    if proper and np.linalg.det(U @ Vt) < 0:
        U[:, -1] = -U[:, -1]
    return U @ Vt


# ---------------------------------------------------------------- low rank


@dataclass(frozen=True, eq=False)
class LoraBlock:
    W0_hat: np.ndarray
    rank: int
    B: np.ndarray
    A: np.ndarray

    @property
    def E(self) -> np.ndarray:
        return self.B @ self.A

    @property
    def weight(self) -> np.ndarray:
        return self.W0_hat + self.E


def lora_relax(W0_hat, X, X_hat, W) -> np.ndarray:
    """Minimum-norm ``argmin_U ||X_hat U - (X W - X_hat W0_hat)||^2``."""
    X, Xh, W, W0 = (np.asarray(a, dtype=np.float64) for a in (X, X_hat, W, W0_hat))
    resid = X @ W - Xh @ W0
    return pinv(Xh.T @ Xh) @ Xh.T @ resid


def lora_project(E_bar: np.ndarray, H_hat: np.ndarray, r: int, floor: float = 0.0):
    """Best rank-``r`` approximation of ``E_bar`` in the ``H_hat``-weighted norm.

    Returns ``(E, B, A)`` with ``E = B @ A``. ``H_hat`` must be positive
    definite; ``floor`` clips its eigenvalues from below before the square roots.
    """
    if r < 1:
        raise ValueError("rank must be >= 1")
    H = np.asarray(H_hat, dtype=np.float64)
    w = np.linalg.eigvalsh(0.5 * (H + H.T))
    if floor <= 0 and w[0] <= 1e-12 * max(1.0, w[-1]):
        raise np.linalg.LinAlgError("H_hat must be positive definite (use a damped Hessian)")
    H_half = sym_power(H, 0.5, floor)
    H_mhalf = sym_power(H, -0.5, floor)
    F = H_half @ np.asarray(E_bar, dtype=np.float64)
    U, s, Vt = np.linalg.svd(F, full_matrices=False)
    keep = s > 1e-10 * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    k = int(min(r, np.count_nonzero(keep)))
    root = np.sqrt(s[:k])
    B = H_mhalf @ (U[:, :k] * root)
    A = root[:, None] * Vt[:k]
    return B @ A, B, A
