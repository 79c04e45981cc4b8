"""Transformer submodule objectives used as LPCD block losses.

Three submodules are covered: masked RoPE attention scores of grouped-query
attention (QK), value aggregation plus output projection with the residual
(VO), and the gated MLP up/down projections with the residual (Up-Down).
Activations are ``(batch, tokens, features)``; 2-D inputs are treated as a
single sequence. Weights are stored ``(in_features, out_features)`` with heads
laid out contiguously along the output axis.

Each objective exposes ``loss(values)`` and ``grad(name, values, rows)`` with
analytic gradients, plus the relaxation steps. The QK, V and Up steps also
have design-matrix solvers that materialize the Kronecker-structured least
squares problem explicitly; they exist to check the gradient solver on tiny
instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from lpcd._linalg import lstsq, pinv
from lpcd.engine import GradientSettings, RelaxResult, adam_minimize

DESIGN_LIMIT = 2**22


@dataclass(frozen=True)
class SubmoduleSpec:
    """Dimensions and wiring of one toy attention + MLP block."""

    d_model: int = 16
    heads: int = 4
    group_size: int = 2
    d_k: int = 4
    d_v: int = 4
    d_up: int = 32
    rope_base: float = 10000.0
    seq_len: int = 32
    mask_orientation: Literal["lower", "upper"] = "lower"

    def __post_init__(self):
        if self.heads % self.group_size:
            raise ValueError(f"heads={self.heads} not divisible by group_size={self.group_size}")
        if self.d_k % 2:
            raise ValueError(f"RoPE needs an even head dimension, got d_k={self.d_k}")
        if self.d_model != self.heads * self.d_k:
            raise ValueError(f"toy wiring needs d_model == heads * d_k ({self.d_model} != {self.heads}*{self.d_k})")
        if self.mask_orientation not in ("lower", "upper"):
            raise ValueError(f"unknown mask orientation {self.mask_orientation!r}")
        if min(self.d_v, self.d_up, self.seq_len) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def n_groups(self) -> int:
        return self.heads // self.group_size

    def group_of(self, h: int) -> int:
        return h // self.group_size

    def mask(self, T: int | None = None) -> np.ndarray:
        return causal_mask(T or self.seq_len, self.mask_orientation)


def causal_mask(T: int, orientation: str = "lower") -> np.ndarray:
    """Binary mask; ``"lower"`` has ``M[i, j] = 1`` iff key ``j <= `` query ``i``."""
    M = np.tril(np.ones((T, T)))
    if orientation == "upper":
        return M.T.copy()
    if orientation != "lower":
        raise ValueError(f"unknown mask orientation {orientation!r}")
    return M


def _batched(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[None] if X.ndim == 2 else X


# ---------------------------------------------------------------- elementwise pieces


def rope_apply(Z: np.ndarray, base: float = 10000.0, inverse: bool = False) -> np.ndarray:
    """Rotate feature pairs ``(2i, 2i+1)`` of token ``m`` by ``m * base**(-2i/d)``.

    Tokens run along axis ``-2``. ``inverse=True`` applies the transpose.
    """
    Z = np.asarray(Z, dtype=np.float64)
    T, d = Z.shape[-2], Z.shape[-1]
    if d % 2:
        raise ValueError(f"RoPE needs an even feature dimension, got {d}")
    theta = base ** (-np.arange(0, d, 2) / d)
    ang = np.arange(T)[:, None] * theta[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    if inverse:
        sin = -sin
    z0, z1 = Z[..., 0::2], Z[..., 1::2]
    out = np.empty_like(Z)
    out[..., 0::2] = z0 * cos - z1 * sin
    out[..., 1::2] = z0 * sin + z1 * cos
    return out


def rope_matrix(T: int, d: int, base: float = 10000.0) -> np.ndarray:
    """Explicit ``(T d, T d)`` matrix with ``vec(rope(Z)) = R vec(Z)``
    for column-major ``vec``."""
    R = np.zeros((T * d, T * d))
    for i in range(d // 2):
        th = base ** (-2 * i / d)
        for m in range(T):
            c, s = math.cos(m * th), math.sin(m * th)
            a, b = (2 * i) * T + m, (2 * i + 1) * T + m
            R[a, a], R[a, b] = c, -s
            R[b, a], R[b, b] = s, c
    return R


def rmsnorm(Z: np.ndarray, weight: np.ndarray | None = None, eps: float = 1e-6) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    Z = np.asarray(Z, dtype=np.float64)
    out = Z / np.sqrt(np.mean(Z**2, axis=-1, keepdims=True) + eps)
    return out if weight is None else out * weight


def silu(Z: np.ndarray) -> np.ndarray:
    return Z / (1.0 + np.exp(-Z))


def masked_softmax(S: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over entries with ``mask == 1``; fully masked rows are zero."""
    allowed = np.broadcast_to(np.asarray(mask) > 0, S.shape)
    Sm = np.where(allowed, S, -np.inf)
    row_max = np.max(Sm, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    E = np.where(allowed, np.exp(Sm - row_max), 0.0)
    Z = np.sum(E, axis=-1, keepdims=True)
    return np.divide(E, Z, out=np.zeros_like(E), where=Z > 0)


def _split_heads(Z: np.ndarray, n: int) -> np.ndarray:
    # (B, T, n*d) -> (B, n, T, d)
    B, T, nd = Z.shape
    return Z.reshape(B, T, n, nd // n).transpose(0, 2, 1, 3)


def _merge_heads(Z: np.ndarray) -> np.ndarray:
    B, n, T, d = Z.shape
    return Z.transpose(0, 2, 1, 3).reshape(B, T, n * d)


def _expand_groups(Z: np.ndarray, spec: SubmoduleSpec) -> np.ndarray:
    # (B, G, T, d) -> (B, H, T, d)
    return np.repeat(Z, spec.group_size, axis=1)


def _reduce_groups(Z: np.ndarray, spec: SubmoduleSpec) -> np.ndarray:
    B, H, T, d = Z.shape
    return Z.reshape(B, spec.n_groups, spec.group_size, T, d).sum(axis=2)


# ---------------------------------------------------------------- attention forward


def qk_scores(X: np.ndarray, W_Q: np.ndarray, W_K: np.ndarray, spec: SubmoduleSpec) -> np.ndarray:
    """Pre-softmax scores ``(B, H, T, T)`` with ``1/sqrt(d_k)`` folded into the queries."""
    X = _batched(X)
    q = rope_apply(_split_heads(X @ W_Q, spec.heads), spec.rope_base) / math.sqrt(spec.d_k)
    k = _expand_groups(rope_apply(_split_heads(X @ W_K, spec.n_groups), spec.rope_base), spec)
    return q @ np.swapaxes(k, -1, -2)


def attention_weights(X: np.ndarray, W_Q: np.ndarray, W_K: np.ndarray, spec: SubmoduleSpec) -> np.ndarray:
    """Causally masked softmax of the scaled scores."""
    S = qk_scores(X, W_Q, W_K, spec)
    return masked_softmax(S, causal_mask(S.shape[-1]))


def attention_heads(P: np.ndarray, X: np.ndarray, W_V: np.ndarray, spec: SubmoduleSpec) -> np.ndarray:
    """Concatenated head outputs ``(B, T, H d_v)`` for attention weights ``P``."""
    v = _expand_groups(_split_heads(_batched(X) @ W_V, spec.n_groups), spec)
    return _merge_heads(P @ v)


@dataclass(frozen=True, eq=False)
class AttentionState:
    """Scores, attention weights and value projections of one attention pass."""

    scores: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    residual: np.ndarray

    @classmethod
    def compute(cls, X, W_Q, W_K, W_V, spec: SubmoduleSpec, residual) -> AttentionState:
        X = _batched(X)
        S = qk_scores(X, W_Q, W_K, spec)
        P = masked_softmax(S, causal_mask(S.shape[-1]))
        return cls(S, P, _split_heads(X @ W_V, spec.n_groups), _batched(residual))


# ---------------------------------------------------------------- QK


class QKObjective:
    """``sum_h ||M * (S_hat_h - S_h)||^2`` over blocks ``"W_Q"`` and ``"W_K"``."""

    def __init__(self, X, X_hat, W_Q, W_K, spec: SubmoduleSpec, mask: np.ndarray | None = None):
        self.spec = spec
        self.X = _batched(X)
        self.X_hat = _batched(X_hat)
        self.reference = qk_scores(self.X, W_Q, W_K, spec)
        T = self.X.shape[1]
        self.mask = spec.mask(T) if mask is None else np.asarray(mask, dtype=np.float64)
        self.n_samples = self.X.shape[0]

    def _parts(self, values, rows=None):
        spec = self.spec
        Xh = self.X_hat if rows is None else self.X_hat[rows]
        ref = self.reference if rows is None else self.reference[rows]
        A = rope_apply(_split_heads(Xh @ values["W_Q"], spec.heads), spec.rope_base) / math.sqrt(spec.d_k)
        Kg = rope_apply(_split_heads(Xh @ values["W_K"], spec.n_groups), spec.rope_base)
        Kh = _expand_groups(Kg, spec)
        E = self.mask * (A @ np.swapaxes(Kh, -1, -2) - ref)
        return Xh, A, Kh, E

    def loss(self, values) -> float:
        return float(np.sum(self._parts(values)[3] ** 2))

    def grad(self, name, values, rows=None) -> np.ndarray:
        spec = self.spec
        Xh, A, Kh, E = self._parts(values, rows)
        if name == "W_Q":
            dA = 2 * E @ Kh
            dQ = rope_apply(dA, spec.rope_base, inverse=True) / math.sqrt(spec.d_k)
            return np.einsum("btd,bhtk->dhk", Xh, dQ).reshape(spec.d_model, -1)
        if name == "W_K":
            dK = _reduce_groups(2 * np.swapaxes(E, -1, -2) @ A, spec)
            dK = rope_apply(dK, spec.rope_base, inverse=True)
            return np.einsum("btd,bgtk->dgk", Xh, dK).reshape(spec.d_model, -1)
        raise KeyError(name)


def qk_loss(W_Q_hat, W_K_hat, X, X_hat, W_Q, W_K, spec: SubmoduleSpec, mask=None) -> float:
    return QKObjective(X, X_hat, W_Q, W_K, spec, mask).loss({"W_Q": W_Q_hat, "W_K": W_K_hat})


def _check_design_size(rows: int, cols: int):
    if rows * cols > DESIGN_LIMIT:
        raise ValueError(f"design matrix {rows}x{cols} exceeds the {DESIGN_LIMIT}-entry limit")


def _vec(A: np.ndarray) -> np.ndarray:
    return A.reshape(-1, order="F")


def qk_design_solve(which: str, objective: QKObjective, values) -> np.ndarray:
    """Least squares by materializing ``D_M Z`` for every head and sequence."""
    spec = objective.spec
    Xh_all = objective.X_hat
    Bn, T, d = Xh_all.shape
    dk = spec.d_k
    _check_design_size(Bn * T * T * (spec.group_size if which == "key" else 1), d * dk)
    R_theta = rope_matrix(T, dk, spec.rope_base)
    c = 1.0 / math.sqrt(dk)
    ncols = spec.heads if which == "query" else spec.n_groups
    out = np.zeros((d, ncols * dk))
    for col in range(ncols):
        heads = [col] if which == "query" else [col * spec.group_size + j for j in range(spec.group_size)]
        blocks, rhs = [], []
        for b in range(Bn):
            Xh = Xh_all[b]
            lift = R_theta @ np.kron(np.eye(dk), Xh)
            for h in heads:
                g = spec.group_of(h)
                S_ref = objective.reference[b, h]
                if which == "query":
                    Kf = rope_apply(Xh @ values["W_K"][:, g * dk : (g + 1) * dk], spec.rope_base)
                    Z = c * np.kron(Kf, np.eye(T)) @ lift
                    Dm, target = _vec(objective.mask), _vec(objective.mask * S_ref)
                else:
                    Qf = c * rope_apply(Xh @ values["W_Q"][:, h * dk : (h + 1) * dk], spec.rope_base)
                    Z = np.kron(Qf, np.eye(T)) @ lift
                    Dm, target = _vec(objective.mask.T), _vec((objective.mask * S_ref).T)
                blocks.append(Dm[:, None] * Z)
                rhs.append(target)
        u = pinv(np.vstack(blocks)) @ np.concatenate(rhs)
        out[:, col * dk : (col + 1) * dk] = u.reshape(d, dk, order="F")
    return out


def qk_relax(
    which: Literal["query", "key"],
    objective: QKObjective,
    values,
    solver: Literal["gradient", "design_matrix_oracle"] = "gradient",
    settings: GradientSettings = GradientSettings(),
    rng: np.random.Generator | None = None,
) -> RelaxResult:
    """Relax the query or key weights with the counterpart fixed."""
    name = "W_Q" if which == "query" else "W_K"
    if which not in ("query", "key"):
        raise ValueError(f"which must be 'query' or 'key', got {which!r}")
    if solver == "design_matrix_oracle":
        return RelaxResult(qk_design_solve(which, objective, values), True, 0.0, 0, solver)
    return _gradient_relax(objective, name, values, settings, rng)


def _gradient_relax(objective, name, values, settings, rng, cols: slice | None = None) -> RelaxResult:
    trial = dict(values)
    base = np.array(values[name], dtype=np.float64)
    cols = cols if cols is not None else slice(None)

    def put(u):
        w = base.copy()
        w[:, cols] = u
        trial[name] = w

    def loss_fn(u):
        put(u)
        return objective.loss(trial)

    def grad_fn(u, rows):
        put(u)
        return objective.grad(name, trial, rows)[:, cols]

    rng = rng if rng is not None else np.random.default_rng(0)
    res = adam_minimize(loss_fn, grad_fn, base[:, cols], objective.n_samples, settings, rng)
    full = base.copy()
    full[:, cols] = res.value
    return RelaxResult(full, res.converged, res.grad_norm, res.epochs, res.solver)


# ---------------------------------------------------------------- VO


class VOObjective:
    """``||Omega_hat + R_hat - (Omega + R)||^2`` over ``"W_V"`` and ``"W_O"``.

    ``P``/``P_hat`` are the (fixed) attention weights of the full-precision and
    quantized paths; ``R``/``R_hat`` the residual streams around attention.
    """

    def __init__(self, X, X_hat, R, R_hat, P, P_hat, W_V, W_O, spec: SubmoduleSpec):
        self.spec = spec
        self.X, self.X_hat = _batched(X), _batched(X_hat)
        self.R, self.R_hat = _batched(R), _batched(R_hat)
        self.P, self.P_hat = np.asarray(P, dtype=np.float64), np.asarray(P_hat, dtype=np.float64)
        if self.P.ndim == 3:
            self.P, self.P_hat = self.P[None], self.P_hat[None]
        self.Y = attention_heads(self.P, self.X, W_V, spec) @ W_O + self.R
        self.n_samples = self.X.shape[0]

    def heads_hat(self, W_V, rows=None) -> np.ndarray:
        P = self.P_hat if rows is None else self.P_hat[rows]
        X = self.X_hat if rows is None else self.X_hat[rows]
        return attention_heads(P, X, W_V, self.spec)

    def residual(self, values, rows=None):
        Hh = self.heads_hat(values["W_V"], rows)
        Rh = self.R_hat if rows is None else self.R_hat[rows]
        Y = self.Y if rows is None else self.Y[rows]
        return Hh, Hh @ values["W_O"] + Rh - Y

    def loss(self, values) -> float:
        return float(np.sum(self.residual(values)[1] ** 2))

    def grad(self, name, values, rows=None) -> np.ndarray:
        spec = self.spec
        Hh, E = self.residual(values, rows)
        if name == "W_O":
            return 2 * np.einsum("btk,btd->kd", Hh, E)
        if name == "W_V":
            P = self.P_hat if rows is None else self.P_hat[rows]
            X = self.X_hat if rows is None else self.X_hat[rows]
            dHeads = _split_heads(2 * E @ values["W_O"].T, spec.heads)
            dV = _reduce_groups(np.swapaxes(P, -1, -2) @ dHeads, spec)
            return np.einsum("btd,bgtk->dgk", X, dV).reshape(spec.d_model, -1)
        raise KeyError(name)


def vo_loss(W_V_hat, W_O_hat, objective: VOObjective) -> float:
    return objective.loss({"W_V": W_V_hat, "W_O": W_O_hat})


def vo_relax_output(objective: VOObjective, values) -> np.ndarray:
    """Exact output-projection step ``H_hat^+ (Y - R_hat)`` over all tokens."""
    Hh = objective.heads_hat(values["W_V"])
    k = Hh.shape[-1]
    target = objective.Y - objective.R_hat
    return lstsq(Hh.reshape(-1, k), target.reshape(-1, target.shape[-1]))


def vo_value_design(objective: VOObjective, values, g: int) -> tuple[np.ndarray, np.ndarray]:
    """``(Z_V, y*)`` for group ``g``, stacked over sequences."""
    spec = objective.spec
    dv = spec.d_v
    Bn, T, d = objective.X_hat.shape
    _check_design_size(Bn * T * d, d * dv)
    W_V = np.array(values["W_V"], dtype=np.float64)
    W_O = values["W_O"]
    W_rest = W_V.copy()
    W_rest[:, g * dv : (g + 1) * dv] = 0.0
    Y_rest = objective.heads_hat(W_rest) @ W_O + objective.R_hat
    rows, rhs = [], []
    for b in range(Bn):
        Z = np.zeros((T * d, d * dv))
        for h in range(g * spec.group_size, (g + 1) * spec.group_size):
            W_Oh = W_O[h * dv : (h + 1) * dv]
            Z += np.kron(W_Oh.T, objective.P_hat[b, h] @ objective.X_hat[b])
        rows.append(Z)
        rhs.append(_vec(objective.Y[b] - Y_rest[b]))
    return np.vstack(rows), np.concatenate(rhs)


def vo_relax_value(
    objective: VOObjective,
    values,
    g: int,
    solver: Literal["gradient", "design_matrix_oracle"] = "gradient",
    settings: GradientSettings = GradientSettings(),
    rng: np.random.Generator | None = None,
) -> RelaxResult:
    """Relax the value weights of group ``g`` with everything else fixed."""
    dv = objective.spec.d_v
    cols = slice(g * dv, (g + 1) * dv)
    if solver == "design_matrix_oracle":
        Z, y = vo_value_design(objective, values, g)
        u = pinv(Z) @ y
        W = np.array(values["W_V"], dtype=np.float64)
        W[:, cols] = u.reshape(objective.spec.d_model, dv, order="F")
        return RelaxResult(W, True, 0.0, 0, solver)
    return _gradient_relax(objective, "W_V", values, settings, rng, cols)


# ---------------------------------------------------------------- Up-Down


class UpDownObjective:
    """``||F_hat + R_hat - (F + R)||^2`` over ``"W_U"`` and ``"W_D"``.

    The gate weights are not optimized: ``W_G`` feeds the full-precision path
    and ``W_G_hat`` (already quantized) the quantized path.
    """

    def __init__(self, X, X_hat, R, R_hat, W_G, W_G_hat, W_U, W_D):
        X, Xh = _batched(X), _batched(X_hat)
        self.X = X.reshape(-1, X.shape[-1])
        self.X_hat = Xh.reshape(-1, Xh.shape[-1])
        R, Rh = _batched(R), _batched(R_hat)
        self.R, self.R_hat = R.reshape(-1, R.shape[-1]), Rh.reshape(-1, Rh.shape[-1])
        self.gate = silu(self.X @ W_G)
        self.gate_hat = silu(self.X_hat @ W_G_hat)
        F = (self.gate * (self.X @ W_U)) @ W_D
        self.Y_mlp = F + self.R - self.R_hat
        self._seq = X.shape[1]
        self.n_samples = X.shape[0]

    def _rows(self, rows):
        if rows is None:
            return slice(None)
        return (np.asarray(rows)[:, None] * self._seq + np.arange(self._seq)).reshape(-1)

    def hidden(self, W_U, rows=None) -> np.ndarray:
        r = self._rows(rows)
        return self.gate_hat[r] * (self.X_hat[r] @ W_U)

    def loss(self, values) -> float:
        return float(np.sum((self.hidden(values["W_U"]) @ values["W_D"] - self.Y_mlp) ** 2))

    def grad(self, name, values, rows=None) -> np.ndarray:
        r = self._rows(rows)
        Z = self.hidden(values["W_U"], rows)
        E = Z @ values["W_D"] - self.Y_mlp[r]
        if name == "W_D":
            return 2 * Z.T @ E
        if name == "W_U":
            return self.X_hat[r].T @ (2 * (E @ values["W_D"].T) * self.gate_hat[r])
        raise KeyError(name)


def updown_loss(W_U_hat, W_D_hat, objective: UpDownObjective) -> float:
    return objective.loss({"W_U": W_U_hat, "W_D": W_D_hat})


def updown_relax_down(objective: UpDownObjective, values) -> np.ndarray:
    """Exact down-projection step ``Z_D^+ Y_mlp``."""
    return lstsq(objective.hidden(values["W_U"]), objective.Y_mlp)


def updown_up_design(objective: UpDownObjective, values) -> np.ndarray:
    """``Z_U = (W_D^T kron I) diag(vec(gate_hat)) (I kron X_hat)``."""
    T, d = objective.X_hat.shape
    d_up = objective.gate_hat.shape[1]
    _check_design_size(T * values["W_D"].shape[1], d * d_up)
    D_phi = _vec(objective.gate_hat)
    return np.kron(values["W_D"].T, np.eye(T)) @ (D_phi[:, None] * np.kron(np.eye(d_up), objective.X_hat))


def updown_relax_up(
    objective: UpDownObjective,
    values,
    solver: Literal["gradient", "design_matrix_oracle"] = "gradient",
    settings: GradientSettings = GradientSettings(),
    rng: np.random.Generator | None = None,
) -> RelaxResult:
    if solver == "design_matrix_oracle":
        Z = updown_up_design(objective, values)
        u = pinv(Z) @ _vec(objective.Y_mlp)
        d, d_up = values["W_U"].shape
        return RelaxResult(u.reshape(d, d_up, order="F"), True, 0.0, 0, solver)
    return _gradient_relax(objective, "W_U", values, settings, rng)
