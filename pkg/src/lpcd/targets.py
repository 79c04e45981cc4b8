"""Corrected layer targets for error propagation (QEP) and residual matching (LoaQ).

Each target is the continuous minimizer handed to a layer projector; the
projector then rounds it onto the grid under the ``X_hat``-weighted metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lpcd._linalg import solve_gram
from lpcd.projectors import DEFAULT_DAMPING


def _flat(A: np.ndarray | None) -> np.ndarray | None:
    if A is None:
        return None
    A = np.asarray(A, dtype=np.float64)
    return A.reshape(-1, A.shape[-1])


@dataclass(frozen=True, eq=False)
class PropagationState:
    """Full-precision and quantized-path activations feeding one layer.

    ``R``/``R_hat`` are the residual streams added to the layer output; they
    are only needed for the LoaQ targets.
    """

    X: np.ndarray
    X_hat: np.ndarray
    R: np.ndarray | None = None
    R_hat: np.ndarray | None = None
    damping_fraction: float = DEFAULT_DAMPING
    H_hat: np.ndarray = field(init=False)
    C: np.ndarray = field(init=False)
    Gamma: np.ndarray | None = field(init=False)

    def __post_init__(self):
        X, Xh = _flat(self.X), _flat(self.X_hat)
        if X.shape != Xh.shape:
            raise ValueError(f"X {X.shape} and X_hat {Xh.shape} differ")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "X_hat", Xh)
        object.__setattr__(self, "H_hat", Xh.T @ Xh)
        object.__setattr__(self, "C", Xh.T @ (X - Xh))
        gamma = None
        if (self.R is None) != (self.R_hat is None):
            raise ValueError("R and R_hat must be given together")
        if self.R is not None:
            R, Rh = _flat(self.R), _flat(self.R_hat)
            if R.shape != Rh.shape or R.shape[0] != X.shape[0]:
                raise ValueError(f"residual shapes {R.shape}, {Rh.shape} do not match X {X.shape}")
            object.__setattr__(self, "R", R)
            object.__setattr__(self, "R_hat", Rh)
            gamma = Xh.T @ (R - Rh)
        object.__setattr__(self, "Gamma", gamma)

    @property
    def has_residual(self) -> bool:
        return self.Gamma is not None

    def solve(self, B: np.ndarray) -> np.ndarray:
        """``H_hat^{-1} B`` with the state's damping."""
        return solve_gram(self.H_hat, B, self.damping_fraction)

    def row_scaled(self, scales: np.ndarray) -> PropagationState:
        s = np.asarray(scales, dtype=np.float64).reshape(-1, 1)
        if s.shape[0] != self.X.shape[0]:
            raise ValueError(f"{s.shape[0]} scales for {self.X.shape[0]} tokens")
        if np.any(s <= 0):
            raise ValueError("frozen normalization scales must be positive")
        return PropagationState(
            s * self.X,
            s * self.X_hat,
            None if self.R is None else s * self.R,
            None if self.R_hat is None else s * self.R_hat,
            self.damping_fraction,
        )


def qep_target(W: np.ndarray, state: PropagationState, alpha: float) -> np.ndarray:
    """``(I + alpha H_hat^{-1} C) W``; returns ``W`` unchanged at ``alpha = 0``."""
    W = np.asarray(W, dtype=np.float64)
    if alpha == 0:
        return W.copy()
    return W + alpha * state.solve(state.C @ W)


def loaq_target(W: np.ndarray, state: PropagationState, alpha: float, beta: float) -> np.ndarray:
    """``(I + alpha H_hat^{-1} C) W + beta H_hat^{-1} Gamma``."""
    if not state.has_residual:
        raise ValueError("LoaQ target needs residual streams R and R_hat")
    target = qep_target(W, state, alpha)
    if beta == 0:
        return target
    return target + beta * state.solve(state.Gamma)


def frozen_norm_scales(Z: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-token RMSNorm factors ``1 / sqrt(mean(z^2) + eps)`` of a full-precision output."""
    Z = _flat(Z)
    return 1.0 / np.sqrt(np.mean(Z**2, axis=1) + eps)


def loaq_normalized_target(
    W: np.ndarray,
    state: PropagationState,
    frozen_norm_scales: np.ndarray,
    alpha: float,
    beta: float,
) -> np.ndarray:
    """LoaQ target for the RMSNorm-aligned objective with frozen per-token scales.

    With the scales frozen the normalized residual objective is linear in the
    weight; it equals the plain LoaQ objective on row-scaled streams. The
    per-feature norm weight scales whole output columns and drops out.
    """
    s = np.asarray(frozen_norm_scales, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("frozen normalization scales must be positive")
    if np.all(s == 1.0):
        return loaq_target(W, state, alpha, beta)
    return loaq_target(W, state.row_scaled(s), alpha, beta)
