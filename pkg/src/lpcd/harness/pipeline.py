"""Sequential layer-wise quantization of a toy model.

Layers are visited in forward order. The full-precision path and the
quantized path are propagated side by side so that every layer sees both its
reference input ``X`` and the input ``X_hat`` produced by the already
quantized layers before it.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np

from lpcd.engine import (
    ActivationAwareProjector,
    BlockVar,
    DirectProjector,
    GradientSettings,
    LogEntry,
    RelaxationWarning,
    SweepConfig,
    objective_log_csv,
    run_sweeps,
)
from lpcd.grid import QuantParams, QuantScheme, fit_scheme
from lpcd.harness.model import NORM_EPS, ModelDims, ToyModel, block_forward, model_forward, token_batch
from lpcd.projectors import hessian, project_activation_aware
from lpcd.submodules import (
    QKObjective,
    UpDownObjective,
    VOObjective,
    attention_heads,
    attention_weights,
    rmsnorm,
    silu,
    updown_relax_down,
    vo_relax_output,
)
from lpcd.targets import PropagationState, frozen_norm_scales, loaq_normalized_target, loaq_target, qep_target

QUANTIZERS = ("rtn", "gptq")
COMPENSATIONS = ("none", "qep", "loaq", "lpcd")
METHODS = tuple(f"{q}+{c}" for q in QUANTIZERS for c in COMPENSATIONS)
CALIB_STREAM, EVAL_STREAM, OPT_STREAM = 1, 2, 3


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a quantization run depends on.

    ``alpha``/``beta`` follow the usual grids of 0.1 and 0.05 steps when tuned;
    no search is run here.
    """

    dims: ModelDims = ModelDims()
    bits: int = 3
    quantizer: Literal["rtn", "gptq"] = "gptq"
    method: Literal["none", "qep", "loaq", "lpcd"] = "lpcd"
    alpha: float = 1.0
    beta: float = 0.5
    sweeps: int = 3
    damping_fraction: float = 0.01
    optimizer: GradientSettings = GradientSettings()
    seed: int = 0
    mask_orientation: Literal["lower", "upper"] = "lower"
    skip_last: int = 0
    loaq_normalized: bool = True
    granularity: Literal["per_tensor", "per_channel"] = "per_channel"
    grid_mode: Literal["symmetric", "asymmetric"] = "asymmetric"
    calib_seqs: int = 8
    eval_seqs: int = 8

    def __post_init__(self):
        if self.quantizer not in QUANTIZERS:
            raise ValueError(f"unknown quantizer {self.quantizer!r}; expected one of {QUANTIZERS}")
        if self.method not in COMPENSATIONS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {COMPENSATIONS}")
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if not 0 <= self.skip_last <= self.dims.n_blocks:
            raise ValueError("skip_last must be between 0 and n_blocks")
        if self.damping_fraction < 0:
            raise ValueError("damping_fraction must be >= 0")
        if self.calib_seqs < 1 or self.eval_seqs < 1:
            raise ValueError("need at least one calibration and one evaluation sequence")

    @property
    def label(self) -> str:
        return f"{self.quantizer}+{self.method}"

    @property
    def scheme(self) -> QuantScheme:
        return QuantScheme(self.bits, self.granularity, self.grid_mode, channel_axis=1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(d["optimizer"]["betas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "dims" in d and isinstance(d["dims"], dict):
            d["dims"] = ModelDims(**d["dims"])
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            opt = dict(d["optimizer"])
            aliases = {"batch": "batch_size"}
            opt = {aliases.get(k, k): v for k, v in opt.items()}
            if "betas" in opt:
                opt["betas"] = tuple(opt["betas"])
            d["optimizer"] = GradientSettings(**opt)
        return cls(**d)


@dataclass
class RunReport:
    """Per-block output MSE and LPCD traces for one (seed, method) cell."""

    config: dict
    method: str
    block_mse: list[float]
    submodule_loss: list[dict[str, float]]
    init_loss: list[dict[str, float]] = field(default_factory=list)
    trace: list[LogEntry] = field(default_factory=list)
    unconverged_relaxations: int = 0
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "config": self.config,
            "method": self.method,
            "block_mse": self.block_mse,
            "submodule_loss": self.submodule_loss,
            "init_loss": self.init_loss,
            "trace": [asdict(e) for e in self.trace],
            "unconverged_relaxations": self.unconverged_relaxations,
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def trace_csv(self) -> str:
        return objective_log_csv(self.trace)

    def rows(self) -> list[dict]:
        bits = self.config["bits"]
        seed = self.config["seed"]
        return [
            {"block": i, "method": self.method, "bits": bits, "seed": seed, "mse": m}
            for i, m in enumerate(self.block_mse)
        ]


# ---------------------------------------------------------------- layer quantization


@dataclass
class _Layer:
    value: np.ndarray
    params: QuantParams


class LayerQuantizer:
    """Target construction + projection for one linear layer."""

    def __init__(self, config: PipelineConfig):
        self.config = config

    def projector(self, X_hat_or_hessian, params: QuantParams | None):
        cfg = self.config
        if cfg.quantizer == "rtn":
            return DirectProjector(cfg.scheme, params)
        if callable(X_hat_or_hessian):
            return ActivationAwareProjector(cfg.scheme, X_hat_or_hessian, params)
        return ActivationAwareProjector(cfg.scheme, hessian(X_hat_or_hessian, cfg.damping_fraction), params)

    def target(self, W, X, X_hat, R=None, R_hat=None) -> tuple[np.ndarray, np.ndarray]:
        """Returns the corrected target and the activations whose Hessian the
        projector should use."""
        cfg = self.config
        if cfg.method == "none":
            return W, X_hat
        if cfg.method == "qep" or R is None:
            state = PropagationState(X, X_hat, damping_fraction=cfg.damping_fraction)
            return qep_target(W, state, cfg.alpha), state.X_hat
        state = PropagationState(X, X_hat, R, R_hat, cfg.damping_fraction)
        if cfg.loaq_normalized:
            s = frozen_norm_scales(state.R + state.X @ W, NORM_EPS)
            target = loaq_normalized_target(W, state, s, cfg.alpha, cfg.beta)
            return target, s[:, None] * state.X_hat
        return loaq_target(W, state, cfg.alpha, cfg.beta), state.X_hat

    def __call__(self, W, X, X_hat, R=None, R_hat=None) -> _Layer:
        target, H_src = self.target(W, _flat(X), _flat(X_hat), _flat(R), _flat(R_hat))
        params = fit_scheme(target, self.config.scheme)
        proj = self.projector(H_src, params)
        return _Layer(proj(target), params)


def _flat(A):
    if A is None:
        return None
    return np.asarray(A).reshape(-1, np.asarray(A).shape[-1])


# ---------------------------------------------------------------- pipeline


def _submodule_losses(fp_blk, q_blk, x, xh, spec_qk, spec) -> dict[str, float]:
    fp = block_forward(fp_blk, x, spec)
    a_h = rmsnorm(xh, fp_blk["norm_attn"], NORM_EPS)
    qk = QKObjective(fp["a"], a_h, fp_blk["W_Q"], fp_blk["W_K"], spec_qk)
    P_h = attention_weights(a_h, q_blk["W_Q"], q_blk["W_K"], spec)
    vo = VOObjective(fp["a"], a_h, x, xh, fp["P"], P_h, fp_blk["W_V"], fp_blk["W_O"], spec)
    xh_mid = xh + attention_heads(P_h, a_h, q_blk["W_V"], spec) @ q_blk["W_O"]
    b_h = rmsnorm(xh_mid, fp_blk["norm_mlp"], NORM_EPS)
    ud = UpDownObjective(fp["b"], b_h, fp["x_mid"], xh_mid, fp_blk["W_G"], q_blk["W_G"], fp_blk["W_U"], fp_blk["W_D"])
    return {
        "qk": qk.loss({"W_Q": q_blk["W_Q"], "W_K": q_blk["W_K"]}),
        "vo": vo.loss({"W_V": q_blk["W_V"], "W_O": q_blk["W_O"]}),
        "updown": ud.loss({"W_U": q_blk["W_U"], "W_D": q_blk["W_D"]}),
    }


def quantize_pipeline(
    model: ToyModel, config: PipelineConfig, calib: np.ndarray | None = None
) -> tuple[ToyModel, RunReport]:
    """Quantize every block of ``model`` in forward order.

    With ``method="lpcd"`` each submodule is first quantized layer by layer
    with the LoaQ targets, then refined by ``config.sweeps`` LPCD sweeps over
    its two weight blocks (Q->K, V->O, Up->Down). The gate projection is
    quantized with the LoaQ pipeline and kept fixed.
    """
    t0 = time.perf_counter()
    dims = model.dims
    spec = dims.spec()
    spec_qk = dims.spec(config.mask_orientation)
    if calib is None:
        calib = token_batch(config.seed, CALIB_STREAM, config.calib_seqs, dims)
    init_cfg = replace(config, method="loaq") if config.method == "lpcd" else config
    layer = LayerQuantizer(init_cfg)
    sweep_cfg = SweepConfig(sweeps=config.sweeps, gradient=config.optimizer, seed=config.seed)
    opt_rng = np.random.default_rng([config.seed, OPT_STREAM])

    qmodel = model.copy()
    x, xh = np.asarray(calib, dtype=np.float64), np.asarray(calib, dtype=np.float64)
    init_losses, sub_losses, trace = [], [], []
    unconverged = 0
    n_quant = dims.n_blocks - config.skip_last

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RelaxationWarning)
        for i, fp_blk in enumerate(model.blocks):
            q_blk = qmodel.blocks[i]
            fp = block_forward(fp_blk, x, spec)
            if i >= n_quant:
                # skipped blocks stay full precision
                sub_losses.append({})
                init_losses.append({})
                xh = block_forward(q_blk, xh, spec)["out"]
                x = fp["out"]
                continue
            a, a_h = fp["a"], rmsnorm(xh, fp_blk["norm_attn"], NORM_EPS)

            # QK
            lq = layer(fp_blk["W_Q"], a, a_h)
            lk = layer(fp_blk["W_K"], a, a_h)
            q_blk["W_Q"], q_blk["W_K"] = lq.value, lk.value
            init = {}
            if config.method == "lpcd":
                obj = QKObjective(a, a_h, fp_blk["W_Q"], fp_blk["W_K"], spec_qk)
                blocks = [
                    BlockVar("W_Q", "weight", lq.value, layer.projector(a_h, lq.params)),
                    BlockVar("W_K", "weight", lk.value, layer.projector(a_h, lk.params)),
                ]
                res = run_sweeps(blocks, obj, replace(sweep_cfg, seed=int(opt_rng.integers(2**31))))
                init["qk"] = res.initial_loss
                trace += [LogEntry(e.sweep, f"b{i}/{e.block_id}", e.loss) for e in res.log]
                q_blk["W_Q"], q_blk["W_K"] = res.values()["W_Q"], res.values()["W_K"]

            # VO
            P_h = attention_weights(a_h, q_blk["W_Q"], q_blk["W_K"], spec)
            lv = layer(fp_blk["W_V"], a, a_h)
            heads_h = attention_heads(P_h, a_h, lv.value, spec)
            lo = layer(fp_blk["W_O"], fp["heads"], heads_h, x, xh)
            q_blk["W_V"], q_blk["W_O"] = lv.value, lo.value
            if config.method == "lpcd":
                obj = VOObjective(a, a_h, x, xh, fp["P"], P_h, fp_blk["W_V"], fp_blk["W_O"], spec)
                damping = config.damping_fraction

                def o_hessian(values, obj=obj, damping=damping):
                    return hessian(obj.heads_hat(values["W_V"]), damping)

                blocks = [
                    BlockVar("W_V", "weight", lv.value, layer.projector(a_h, lv.params)),
                    BlockVar(
                        "W_O", "weight", lo.value, layer.projector(o_hessian, lo.params),
                        closed_form=lambda v, obj=obj: vo_relax_output(obj, v),
                    ),
                ]
                res = run_sweeps(blocks, obj, replace(sweep_cfg, seed=int(opt_rng.integers(2**31))))
                init["vo"] = res.initial_loss
                trace += [LogEntry(e.sweep, f"b{i}/{e.block_id}", e.loss) for e in res.log]
                q_blk["W_V"], q_blk["W_O"] = res.values()["W_V"], res.values()["W_O"]

            xh_mid = xh + attention_heads(P_h, a_h, q_blk["W_V"], spec) @ q_blk["W_O"]

            # Up-Down
            b, b_h = fp["b"], rmsnorm(xh_mid, fp_blk["norm_mlp"], NORM_EPS)
            lg = layer(fp_blk["W_G"], b, b_h)
            lu = layer(fp_blk["W_U"], b, b_h)
            hidden_h = silu(b_h @ lg.value) * (b_h @ lu.value)
            ld = layer(fp_blk["W_D"], fp["hidden"], hidden_h, fp["x_mid"], xh_mid)
            q_blk["W_G"], q_blk["W_U"], q_blk["W_D"] = lg.value, lu.value, ld.value
            if config.method == "lpcd":
                obj = UpDownObjective(b, b_h, fp["x_mid"], xh_mid, fp_blk["W_G"], lg.value, fp_blk["W_U"], fp_blk["W_D"])
                damping = config.damping_fraction

                def d_hessian(values, obj=obj, damping=damping):
                    return hessian(obj.hidden(values["W_U"]), damping)

                blocks = [
                    BlockVar("W_U", "weight", lu.value, layer.projector(b_h, lu.params)),
                    BlockVar(
                        "W_D", "weight", ld.value, layer.projector(d_hessian, ld.params),
                        closed_form=lambda v, obj=obj: updown_relax_down(obj, v),
                    ),
                ]
                res = run_sweeps(blocks, obj, replace(sweep_cfg, seed=int(opt_rng.integers(2**31))))
                init["updown"] = res.initial_loss
                trace += [LogEntry(e.sweep, f"b{i}/{e.block_id}", e.loss) for e in res.log]
                q_blk["W_U"], q_blk["W_D"] = res.values()["W_U"], res.values()["W_D"]

            sub_losses.append(_submodule_losses(fp_blk, q_blk, x, xh, spec_qk, spec))
            init_losses.append(init)
            xh = block_forward(q_blk, xh, spec)["out"]
            x = fp["out"]
        unconverged = sum(1 for w in caught if issubclass(w.category, RelaxationWarning))
        for w in caught:
            if not issubclass(w.category, RelaxationWarning):
                warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)

    report = RunReport(
        config=config.to_dict(),
        method=config.label,
        block_mse=[],
        submodule_loss=sub_losses,
        init_loss=init_losses,
        trace=trace,
        unconverged_relaxations=unconverged,
    )
    report.wall_clock = time.perf_counter() - t0
    return qmodel, report


def evaluate_block_mse(model: ToyModel, qmodel: ToyModel, batch: np.ndarray) -> list[float]:
    """Mean squared difference of every block's output, each model run on its own path."""
    fp = model_forward(model, batch)
    q = model_forward(qmodel, batch)
    return [float(np.mean((a - b) ** 2)) for a, b in zip(fp, q)]


def run_cell(model: ToyModel, config: PipelineConfig) -> tuple[ToyModel, RunReport]:
    """Quantize on the calibration stream and score on the disjoint evaluation stream."""
    t0 = time.perf_counter()
    qmodel, report = quantize_pipeline(model, config)
    eval_batch = token_batch(config.seed, EVAL_STREAM, config.eval_seqs, model.dims)
    report.block_mse = evaluate_block_mse(model, qmodel, eval_batch)
    report.wall_clock = time.perf_counter() - t0
    return qmodel, report
