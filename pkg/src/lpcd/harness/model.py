"""Seeded toy transformer: pre-norm blocks of grouped-query attention and a gated MLP."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from lpcd.submodules import (
    SubmoduleSpec,
    attention_heads,
    attention_weights,
    rmsnorm,
    silu,
)

WEIGHT_NAMES = ("W_Q", "W_K", "W_V", "W_O", "W_G", "W_U", "W_D")
NORM_NAMES = ("norm_attn", "norm_mlp")
NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 16
    heads: int = 4
    group_size: int = 2
    d_k: int = 4
    d_v: int = 4
    d_up: int = 32
    seq_len: int = 32
    n_blocks: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        self.spec()  # validates the attention wiring

    def spec(self, mask_orientation: str = "lower") -> SubmoduleSpec:
        return SubmoduleSpec(
            d_model=self.d_model,
            heads=self.heads,
            group_size=self.group_size,
            d_k=self.d_k,
            d_v=self.d_v,
            d_up=self.d_up,
            rope_base=self.rope_base,
            seq_len=self.seq_len,
            mask_orientation=mask_orientation,
        )

    def shapes(self) -> dict[str, tuple[int, int]]:
        d, n_kv = self.d_model, self.heads // self.group_size
        return {
            "W_Q": (d, self.heads * self.d_k),
            "W_K": (d, n_kv * self.d_k),
            "W_V": (d, n_kv * self.d_v),
            "W_O": (self.heads * self.d_v, d),
            "W_G": (d, self.d_up),
            "W_U": (d, self.d_up),
            "W_D": (self.d_up, d),
        }

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ToyModel:
    dims: ModelDims
    blocks: list[dict[str, np.ndarray]]
    seed: int = 0
    init_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def copy(self) -> ToyModel:
        return ToyModel(self.dims, [{k: v.copy() for k, v in b.items()} for b in self.blocks], self.seed, self.init_scale, dict(self.meta))


def _f32(a: np.ndarray) -> np.ndarray:
    # weights live on float32 values so archives round-trip exactly
    return a.astype(np.float32).astype(np.float64)


def gen_toy_model(seed: int, dims: ModelDims = ModelDims(), init_scale: float = 1.0) -> ToyModel:
    """Normal weights scaled by ``init_scale / sqrt(fan_in)``; norm weights near 1."""
    rng = np.random.default_rng([seed, 0])
    blocks = []
    for _ in range(dims.n_blocks):
        blk = {}
        for name, (fan_in, fan_out) in dims.shapes().items():
            blk[name] = _f32(rng.standard_normal((fan_in, fan_out)) * init_scale / np.sqrt(fan_in))
        for name in NORM_NAMES:
            blk[name] = _f32(1.0 + 0.1 * rng.standard_normal(dims.d_model))
        blocks.append(blk)
    return ToyModel(dims, blocks, seed, init_scale)


def token_batch(seed: int, stream: int, n_seqs: int, dims: ModelDims) -> np.ndarray:
    """Standard-normal embeddings ``(n_seqs, seq_len, d_model)`` from a named seed stream."""
    rng = np.random.default_rng([seed, stream])
    return rng.standard_normal((n_seqs, dims.seq_len, dims.d_model))


def block_forward(blk: dict[str, np.ndarray], x: np.ndarray, spec: SubmoduleSpec) -> dict[str, np.ndarray]:
    """One pre-norm block; returns the intermediates the quantizers consume."""
    a = rmsnorm(x, blk["norm_attn"], NORM_EPS)
    P = attention_weights(a, blk["W_Q"], blk["W_K"], spec)
    heads = attention_heads(P, a, blk["W_V"], spec)
    x_mid = x + heads @ blk["W_O"]
    b = rmsnorm(x_mid, blk["norm_mlp"], NORM_EPS)
    hidden = silu(b @ blk["W_G"]) * (b @ blk["W_U"])
    out = x_mid + hidden @ blk["W_D"]
    return {"a": a, "P": P, "heads": heads, "x_mid": x_mid, "b": b, "hidden": hidden, "out": out}


def model_forward(model: ToyModel, x: np.ndarray) -> list[np.ndarray]:
    """Outputs of every block (post-residual, before the next norm)."""
    spec = model.dims.spec()
    outs = []
    for blk in model.blocks:
        x = block_forward(blk, x, spec)["out"]
        outs.append(x)
    return outs
