"""Uniform quantization grids and the entrywise-nearest (RTN) projector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

Granularity = Literal["per_tensor", "per_channel"]
Mode = Literal["symmetric", "asymmetric"]


@dataclass(frozen=True)
class QuantScheme:
    """How a grid is built for a matrix.

    ``channel_axis`` picks the axis that indexes channels when
    ``granularity == "per_channel"``: weights are stored ``(in, out)`` so the
    output channel is axis 1; a per-token activation scheme uses axis 0.
    """

    bits: int = 4
    granularity: Granularity = "per_channel"
    mode: Mode = "asymmetric"
    channel_axis: int = 1

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if self.granularity not in ("per_tensor", "per_channel"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.mode not in ("symmetric", "asymmetric"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.channel_axis not in (0, 1):
            raise ValueError("channel_axis must be 0 or 1")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1


@dataclass(frozen=True)
class QuantParams:
    """Per-channel grid parameters, shaped to broadcast against the matrix."""

    scales: np.ndarray
    zero_points: np.ndarray
    bits: int
    degenerate: np.ndarray

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    def levels(self, channel: int = 0) -> np.ndarray:
        """All grid values of one channel, ascending."""
        s = self.scales.reshape(-1)[channel]
        z = self.zero_points.reshape(-1)[channel]
        return s * (np.arange(self.qmax + 1) - z)


@dataclass(frozen=True)
class QuantizedMatrix:
    codes: np.ndarray
    params: QuantParams

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def _reduce_axes(W: np.ndarray, scheme: QuantScheme) -> tuple[int, ...] | None:
    if scheme.granularity == "per_tensor":
        return None
    return (1 - scheme.channel_axis,)


def fit_scheme(W: np.ndarray, scheme: QuantScheme) -> QuantParams:
    """Min-max calibration of a grid for ``W``.

    Asymmetric grids always contain zero (the zero point is an integer code),
    so the range is widened to include 0 and the scale is chosen so that both
    extremes are representable. Constant channels (symmetric: all-zero) are
    flagged degenerate and get ``scale = 1``.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {W.shape}")
    axes = _reduce_axes(W, scheme)
    qmax = scheme.qmax
    wmin = np.min(W, axis=axes, keepdims=True)
    wmax = np.max(W, axis=axes, keepdims=True)

    if scheme.mode == "symmetric":
        amax = np.maximum(np.abs(wmin), np.abs(wmax))
        degenerate = amax == 0
        scales = np.where(degenerate, 1.0, 2.0 * amax / qmax)
        zero_points = np.full_like(scales, qmax / 2.0)
        return QuantParams(scales, zero_points, scheme.bits, degenerate)

    degenerate = wmax == wmin
    lo = np.minimum(wmin, 0.0)
    hi = np.maximum(wmax, 0.0)
    scales = np.empty_like(lo)
    zero_points = np.empty_like(lo)
    for idx in np.ndindex(lo.shape):
        if degenerate[idx]:
            c = float(wmin[idx])
            scales[idx] = 1.0
            zero_points[idx] = 0.0 if c >= 0 else float(qmax)
        else:
            scales[idx], zero_points[idx] = _fit_range(float(lo[idx]), float(hi[idx]), qmax)
    return QuantParams(scales, zero_points, scheme.bits, degenerate)


def _fit_range(lo: float, hi: float, qmax: int) -> tuple[float, float]:
    # lo <= 0 <= hi and lo < hi
    if lo == 0.0:
        return hi / qmax, 0.0
    if hi == 0.0:
        return -lo / qmax, float(qmax)
    if qmax == 1:
        # two levels cannot straddle zero; keep the larger side, clamp the other
        return (hi, 0.0) if hi >= -lo else (-lo, 1.0)
    z0 = qmax * (-lo) / (hi - lo)
    best = None
    for z in sorted({int(np.floor(z0)), int(np.ceil(z0))}):
        z = min(max(z, 1), qmax - 1)
        s = max(-lo / z, hi / (qmax - z))
        if best is None or s < best[0]:
            best = (s, float(z))
    return best


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def project_direct(W: np.ndarray, params: QuantParams) -> QuantizedMatrix:
    """Entrywise-nearest grid point; ties go to the level farther from zero."""
    W = np.asarray(W, dtype=np.float64)
    try:
        np.broadcast_shapes(W.shape, params.scales.shape)
    except ValueError:
        raise ValueError(
            f"params of shape {params.scales.shape} do not fit matrix {W.shape}"
        ) from None
    t = W / params.scales
    z = params.zero_points
    codes = np.where(t >= 0, np.floor(t + z + 0.5), np.ceil(t + z - 0.5))
    codes = np.clip(codes, 0, params.qmax).astype(np.int64)
    return QuantizedMatrix(codes, params)


def dequantize(Q: QuantizedMatrix) -> np.ndarray:
    p = Q.params
    return p.scales * (Q.codes - p.zero_points)


def quantize(W: np.ndarray, scheme: QuantScheme) -> QuantizedMatrix:
    """Fit a grid to ``W`` and round to it."""
    return project_direct(W, fit_scheme(W, scheme))


def fake_quantize(W: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    return dequantize(quantize(W, scheme))
