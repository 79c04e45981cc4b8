"""Acceptance criteria 1-9, one test per criterion.

Each test records a single pass/fail line (shown in the terminal summary) and
then asserts the same condition.
"""

import itertools
import json
import time
import warnings

import numpy as np
import pytest

from lpcd.engine import (
    ActivationAwareProjector,
    BlockVar,
    DirectProjector,
    GradientSettings,
    LinearLayerObjective,
    RelaxationWarning,
    SweepConfig,
    block_finite_diff,
    finite_diff_gradient,
    relax_block,
    run_sweeps,
)
from lpcd.extensions import (
    RotationBlock,
    kv_key_relax,
    kv_value_relax,
    lora_project,
    lora_relax,
    qep_activation_relax,
    rotation_grad,
    rotation_loss,
    rotation_project,
    rotation_relax,
)
from lpcd.grid import QuantScheme, fit_scheme, project_direct
from lpcd.harness.archive import load_model, save_model, write_tensors
from lpcd.harness.cli import main as cli_main
from lpcd.harness.model import ModelDims, gen_toy_model
from lpcd.harness.pipeline import PipelineConfig, run_cell
from lpcd.projectors import Hessian, hessian, project_activation_aware
from lpcd.submodules import (
    QKObjective,
    SubmoduleSpec,
    UpDownObjective,
    VOObjective,
    attention_weights,
    qk_relax,
    updown_relax_down,
    updown_relax_up,
    vo_relax_output,
    vo_relax_value,
)
from lpcd.targets import PropagationState, loaq_target, qep_target

quiet = pytest.mark.filterwarnings("ignore::lpcd.engine.RelaxationWarning")


# ---------------------------------------------------------------- 1 and 2


def _layer_instance(seed, residual):
    rng = np.random.default_rng([seed, 17])
    N, M = (int(v) for v in rng.integers(1, 5, size=2))
    T = 8
    X = rng.standard_normal((T, N))
    Xh = X + 0.3 * rng.standard_normal((T, N))
    W = rng.standard_normal((N, M))
    R = Rh = None
    if residual:
        R = rng.standard_normal((T, M))
        Rh = R + 0.3 * rng.standard_normal((T, M))
    return X, Xh, W, R, Rh


def _brute_force_codes(X, Xh, W, params, R=None, Rh=None):
    """Exhaustive minimization of the layer output error, column by column
    (the objective is a sum of independent per-column terms)."""
    N, M = W.shape
    n_levels = params.qmax + 1
    scales = np.broadcast_to(params.scales, W.shape)
    zps = np.broadcast_to(params.zero_points, W.shape)
    codes = np.empty((N, M), dtype=np.int64)
    for j in range(M):
        ref = X @ W[:, j] + (0 if R is None else R[:, j])
        off = 0 if Rh is None else Rh[:, j]
        best, best_c = np.inf, None
        for c in itertools.product(range(n_levels), repeat=N):
            w = scales[:, j] * (np.array(c) - zps[:, j])
            loss = float(np.sum((Xh @ w + off - ref) ** 2))
            if loss < best:
                best, best_c = loss, c
        codes[:, j] = best_c
    return codes


def _single_lpcd_step(X, Xh, W, R=None, Rh=None):
    scheme = QuantScheme(2)
    params = fit_scheme(W, scheme)  # the grid stays fixed
    obj = LinearLayerObjective(X, W, R)
    proj = ActivationAwareProjector(scheme, hessian(Xh, 0.0), params, exact=True)
    blocks = [
        BlockVar("W", "weight", project_direct(W, params).dequantize(), proj, closed_form=obj.weight_closed_form),
        BlockVar("X", "activation", Xh, DirectProjector(scheme), frozen=True),
    ]
    if R is not None:
        blocks.append(BlockVar("R", "activation", Rh, DirectProjector(scheme), frozen=True))
    res = run_sweeps(blocks, obj, SweepConfig(sweeps=1))
    return proj.last.codes, params, res.relaxations[0].value


def test_criterion_1_qep_is_one_lpcd_step(acceptance):
    t0 = time.perf_counter()
    mismatches, target_err = 0, 0.0
    for seed in range(100):
        X, Xh, W, _, _ = _layer_instance(seed, residual=False)
        codes, params, relaxed = _single_lpcd_step(X, Xh, W)
        target = qep_target(W, PropagationState(X, Xh, damping_fraction=0.0), 1.0)
        target_err = max(target_err, float(np.abs(relaxed - target).max()))
        mismatches += not np.array_equal(codes, _brute_force_codes(X, Xh, W, params))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30 and target_err < 1e-9
    acceptance(1, ok, f"{100 - mismatches}/100 code matches, relaxation vs QEP target {target_err:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_loaq_is_one_lpcd_step(acceptance):
    t0 = time.perf_counter()
    mismatches, target_err = 0, 0.0
    for seed in range(100):
        X, Xh, W, R, Rh = _layer_instance(seed, residual=True)
        codes, params, relaxed = _single_lpcd_step(X, Xh, W, R, Rh)
        target = loaq_target(W, PropagationState(X, Xh, R, Rh, damping_fraction=0.0), 1.0, 1.0)
        target_err = max(target_err, float(np.abs(relaxed - target).max()))
        mismatches += not np.array_equal(codes, _brute_force_codes(X, Xh, W, params, R, Rh))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and target_err < 1e-9
    acceptance(2, ok, f"{100 - mismatches}/100 code matches, relaxation vs LoaQ target {target_err:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3


SPEC8 = SubmoduleSpec(d_model=8, heads=2, group_size=2, d_k=4, d_v=4, d_up=8, seq_len=8)
# full-batch Adam with a step sized for these unit-scale instances
FIT = GradientSettings(lr=0.3, epochs=5000, batch_size=10**6, grad_tol=1e-12)


def _sub_instances(seed, spec=SPEC8, T=8, B=2):
    rng = np.random.default_rng([seed, 3])
    X = rng.standard_normal((B, T, spec.d_model))
    Xh = X + 0.2 * rng.standard_normal(X.shape)
    R = rng.standard_normal(X.shape)
    Rh = R + 0.2 * rng.standard_normal(X.shape)
    d, kd, vd = spec.d_model, spec.n_groups * spec.d_k, spec.n_groups * spec.d_v
    WQ, WK = rng.standard_normal((d, spec.heads * spec.d_k)), rng.standard_normal((d, kd))
    WV, WO = rng.standard_normal((d, vd)), rng.standard_normal((spec.heads * spec.d_v, d))
    WG, WU, WD = (rng.standard_normal(s) for s in ((d, spec.d_up), (d, spec.d_up), (spec.d_up, d)))
    P = attention_weights(X, WQ, WK, spec)
    Ph = attention_weights(Xh, WQ + 0.1 * rng.standard_normal(WQ.shape), WK, spec)
    qk = QKObjective(X, Xh, WQ, WK, spec)
    vo = VOObjective(X, Xh, R, Rh, P, Ph, WV, WO, spec)
    ud = UpDownObjective(X, Xh, R, Rh, WG, WG + 0.05, WU, WD)
    perturb = lambda A: A + 0.3 * rng.standard_normal(A.shape)
    return qk, vo, ud, {"W_Q": perturb(WQ), "W_K": perturb(WK)}, {"W_V": perturb(WV), "W_O": perturb(WO)}, {
        "W_U": perturb(WU), "W_D": perturb(WD)}


def _gap(loss, ref):
    return (loss - ref) / max(ref, 1e-300)


@quiet
def test_criterion_3_gradient_relaxation_matches_exact(acceptance):
    cfg = SweepConfig(relax_solver="gradient", gradient=FIT)
    closed_gaps, oracle_gaps = [], {"W_Q": [], "W_K": [], "W_V": [], "W_U": []}
    for seed in range(20):
        qk, vo, ud, vq, vv, vu = _sub_instances(seed)
        for obj, values, name, closed in (
            (vo, vv, "W_O", lambda v, o=vo: vo_relax_output(o, v)),
            (ud, vu, "W_D", lambda v, o=ud: updown_relax_down(o, v)),
        ):
            blk = BlockVar(name, "weight", values[name], None, closed_form=closed)
            ref = obj.loss({**values, name: closed(values)})
            got = obj.loss({**values, name: relax_block(blk, values, obj, cfg, np.random.default_rng(seed)).value})
            closed_gaps.append(_gap(got, ref))
        if seed >= 10:
            continue
        rng = np.random.default_rng(seed)
        for which, name in (("query", "W_Q"), ("key", "W_K")):
            ref = qk.loss({**vq, name: qk_relax(which, qk, vq, "design_matrix_oracle").value})
            got = qk.loss({**vq, name: qk_relax(which, qk, vq, "gradient", FIT, rng).value})
            oracle_gaps[name].append(_gap(got, ref))
        ref = vo.loss({**vv, "W_V": vo_relax_value(vo, vv, 0, "design_matrix_oracle").value})
        got = vo.loss({**vv, "W_V": vo_relax_value(vo, vv, 0, "gradient", FIT, rng).value})
        oracle_gaps["W_V"].append(_gap(got, ref))
        ref = ud.loss({**vu, "W_U": updown_relax_up(ud, vu, "design_matrix_oracle").value})
        got = ud.loss({**vu, "W_U": updown_relax_up(ud, vu, "gradient", FIT, rng).value})
        oracle_gaps["W_U"].append(_gap(got, ref))
    worst_closed = max(closed_gaps)
    worst_oracle = {k: max(v) for k, v in oracle_gaps.items()}
    ok = worst_closed <= 1e-4 and all(v <= 1e-3 for v in worst_oracle.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst_oracle.items())
    acceptance(3, ok, f"O/Down worst relative gap {worst_closed:.1e} (<=1e-4, 20 instances each); "
                      f"vs oracle {detail} (<=1e-3, 10 instances each)")
    assert ok


# ---------------------------------------------------------------- 4


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def test_criterion_4_gradients_match_finite_differences(acceptance):
    spec4 = SubmoduleSpec(d_model=4, heads=2, group_size=1, d_k=2, d_v=2, d_up=4, seq_len=4)
    worst = {}
    for seed in range(10):
        qk, vo, ud, vq, vv, vu = _sub_instances(seed, spec=spec4, T=4, B=1)
        for label, obj, values in (("qk", qk, vq), ("vo", vo, vv), ("updown", ud, vu)):
            for name in values:
                assert values[name].shape == (4, 4)
                err = _rel(obj.grad(name, values), block_finite_diff(obj, name, values, 1e-6))
                worst[label] = max(worst.get(label, 0.0), err)
        rng = np.random.default_rng(seed)
        X, Xh, W, Wh, R = (rng.standard_normal((4, 4)) for _ in range(5))
        fd = finite_diff_gradient(lambda r: rotation_loss(r, X, Xh, W, Wh, (1.0, 0.5)), R, 1e-6)
        worst["rotation"] = max(worst.get("rotation", 0.0), _rel(rotation_grad(R, X, Xh, W, Wh, (1.0, 0.5)), fd))
    ok = all(v <= 1e-4 for v in worst.values())
    acceptance(4, ok, "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<=1e-4, 10 seeds)")
    assert ok


# ---------------------------------------------------------------- 5


def _orth(G, scale):
    """Size of a stationarity residual relative to the scale of its terms."""
    return float(np.linalg.norm(G) / max(scale, 1e-300))


def test_criterion_5_first_order_optimality(acceptance):
    worst = {}

    def note(name, value):
        worst[name] = max(worst.get(name, 0.0), value)

    for seed in range(10):
        rng = np.random.default_rng([seed, 5])
        T, N, M = 12, 4, 3
        X = rng.standard_normal((T, N))
        Xh = X + 0.2 * rng.standard_normal((T, N))
        W = rng.standard_normal((N, M))
        R = rng.standard_normal((T, M))
        Rh = R + 0.2 * rng.standard_normal((T, M))
        nrm = np.linalg.norm

        Wq = qep_target(W, PropagationState(X, Xh, damping_fraction=0.0), 1.0)
        note("qep", _orth(Xh.T @ (Xh @ Wq - X @ W), nrm(Xh) * nrm(X @ W)))
        Wl = loaq_target(W, PropagationState(X, Xh, R, Rh, damping_fraction=0.0), 1.0, 1.0)
        ref = X @ W + R
        note("loaq", _orth(Xh.T @ (Xh @ Wl + Rh - ref), nrm(Xh) * nrm(ref)))

        Wh = W + 0.2 * rng.standard_normal(W.shape)
        Xa = qep_activation_relax(X, W, Wh)
        note("activation", _orth((Xa @ Wh - X @ W) @ Wh.T, nrm(X @ W) * nrm(Wh)))

        Q = rng.standard_normal((T, N))
        Qh = Q + 0.2 * rng.standard_normal(Q.shape)
        K = rng.standard_normal((T, N))
        Kb = kv_key_relax(K, Q, Qh, 1.0)
        note("kv_key", _orth(Qh.T @ (Qh @ Kb.T - Q @ K.T), nrm(Qh) * nrm(Q @ K.T)))

        A = rng.random((T, T))
        Ah = A + 0.05 * rng.standard_normal(A.shape)
        V = rng.standard_normal((T, M))
        Vb = kv_value_relax(V, A, Ah, 1.0)
        note("kv_value", _orth(Ah.T @ (Ah @ Vb - A @ V), nrm(Ah) * nrm(A @ V)))

        Xr, Wr = rng.standard_normal((T, N)), rng.standard_normal((N, M))
        blk = RotationBlock.build(Xr, Xr + 0.1, Wr, Wr - 0.1)
        Rb = rotation_relax(Xr, Xr + 0.1, Wr, Wr - 0.1)
        note("rotation", _orth(blk.H_R @ Rb - blk.B_R, nrm(blk.B_R)))

        qk, vo, ud, vq, vv, vu = _sub_instances(seed)
        WO = vo_relax_output(vo, vv)
        note("vo_output", _orth(vo.grad("W_O", {**vv, "W_O": WO}), 2 * np.linalg.norm(vo.heads_hat(vv["W_V"])) * np.linalg.norm(vo.Y)))
        WD = updown_relax_down(ud, vu)
        note("down", _orth(ud.grad("W_D", {**vu, "W_D": WD}), 2 * np.linalg.norm(ud.hidden(vu["W_U"])) * np.linalg.norm(ud.Y_mlp)))

        W0 = W + 0.3 * rng.standard_normal(W.shape)
        E = lora_relax(W0, X, Xh, W)
        note("lora", _orth(Xh.T @ (Xh @ (W0 + E) - X @ W), nrm(Xh) * nrm(X @ W)))
    ok = all(v <= 1e-8 for v in worst.values())
    acceptance(5, ok, "worst normalized residual " + ", ".join(f"{k} {v:.0e}" for k, v in worst.items()) + " (<=1e-8)")
    assert ok


# ---------------------------------------------------------------- 6


def _random_orthogonal(rng, n):
    Q, Rm = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(Rm))


def test_criterion_6_procrustes_and_low_rank(acceptance):
    orth_err, trace_ok, lora_ok, rank_ok = 0.0, True, True, True
    for seed in range(10):
        rng = np.random.default_rng([seed, 6])
        Rb = rng.standard_normal((5, 5))
        R = rotation_project(Rb)
        orth_err = max(orth_err, float(np.linalg.norm(R.T @ R - np.eye(5))))
        best = np.trace(R.T @ Rb)
        trace_ok &= all(np.trace(_random_orthogonal(rng, 5).T @ Rb) <= best + 1e-12 for _ in range(100))

        Eb = rng.standard_normal((6, 5))
        Xh = rng.standard_normal((20, 6))
        H = Xh.T @ Xh
        for r in (1, 2, 3):
            E, B, A = lora_project(Eb, H, r)
            err = float(np.trace((E - Eb).T @ H @ (E - Eb)))
            for _ in range(100):
                C = rng.standard_normal((6, r)) @ rng.standard_normal((r, 5))
                lora_ok &= err <= float(np.trace((C - Eb).T @ H @ (C - Eb))) + 1e-12
            rank_ok &= np.linalg.matrix_rank(E) == r and B.shape == (6, r) and A.shape == (r, 5)
        low = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
        E, B, A = lora_project(low, H, 4)
        rank_ok &= np.linalg.matrix_rank(E) == 2 and B.shape[1] == 2
    ok = orth_err <= 1e-10 and trace_ok and lora_ok and rank_ok
    acceptance(6, ok, f"||R^T R - I|| max {orth_err:.1e}; trace beats 100 random: {trace_ok}; "
                      f"H-weighted rank-r beats 100 random: {lora_ok}; rank bound exact: {rank_ok}")
    assert ok


# ---------------------------------------------------------------- 7


TREND_SEEDS = range(10)
# 32 calibration sequences (1024 tokens) and an Adam step scaled to the toy weights;
# the defaults (256 tokens, step 1e-5) are recorded separately in the notes.
TREND_OVERRIDES = dict(calib_seqs=32, optimizer=GradientSettings(lr=1e-2))


def test_criterion_7_block_mse_trend(acceptance):
    t0 = time.perf_counter()
    mse = {m: [] for m in ("qep", "loaq", "lpcd")}
    for seed in TREND_SEEDS:
        model = gen_toy_model(seed)
        for method in mse:
            cfg = PipelineConfig(seed=seed, bits=3, quantizer="gptq", method=method, sweeps=3, **TREND_OVERRIDES)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RelaxationWarning)
                mse[method].append(run_cell(model, cfg)[1].block_mse)
    elapsed = time.perf_counter() - t0
    med = {m: float(np.median(v)) for m, v in mse.items()}
    wins = sum(np.median(a) <= np.median(b) for a, b in zip(mse["lpcd"], mse["loaq"]))
    ok = med["lpcd"] <= med["loaq"] <= med["qep"] and wins >= 8 and elapsed < 300
    acceptance(7, ok, f"median block MSE lpcd {med['lpcd']:.4f} <= loaq {med['loaq']:.4f} <= qep {med['qep']:.4f}; "
                      f"lpcd <= loaq on {wins}/10 seeds; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_projector_sanity(acceptance):
    rng = np.random.default_rng([8, 0])
    nearest_ok, identity_ok = True, True
    for _ in range(50):
        W = rng.standard_normal((4, 3))
        p = fit_scheme(W, QuantScheme(int(rng.integers(1, 5))))
        got = project_direct(W, p).dequantize()
        for i, j in np.ndindex(W.shape):
            levels = p.levels(j)
            nearest_ok &= abs(got[i, j] - W[i, j]) <= np.min(np.abs(levels - W[i, j])) + 1e-12
        identity_ok &= np.array_equal(project_activation_aware(W, Hessian(np.eye(4)), p).codes, project_direct(W, p).codes)
    # correlated input features, the regime Hessian-weighted rounding targets
    rng = np.random.default_rng([8, 1])
    wins = 0
    for _ in range(200):
        X = rng.standard_normal((64, 8)) @ rng.standard_normal((8, 8))
        W = rng.standard_normal((8, 8))
        p = fit_scheme(W, QuantScheme(3))
        loss = lambda Q: float(np.sum((X @ (Q - W)) ** 2))
        wins += loss(project_activation_aware(W, hessian(X, 0.01), p).dequantize()) <= loss(project_direct(W, p).dequantize())
    ok = nearest_ok and identity_ok and wins >= 190
    acceptance(8, ok, f"nearest by enumeration: {nearest_ok}; identity Hessian equals RTN: {identity_ok}; "
                      f"GPTQ <= RTN on {wins}/200 (>=190)")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism_and_io(acceptance, tmp_path, capsys):
    model = gen_toy_model(4)
    cfg = PipelineConfig(seed=4, method="lpcd")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RelaxationWarning)
        reports = [run_cell(model, cfg)[1].to_json() for _ in range(2)]
    deterministic = reports[0] == reports[1]

    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    round_trip = all(np.array_equal(a[k], b[k]) and a[k].tobytes() == b[k].tobytes()
                     for a, b in zip(model.blocks, back.blocks) for k in a)

    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"dims": {"d_model": 10}}))
    blob = (tmp_path / "m" / "tensors.bin").read_bytes()
    (tmp_path / "long").mkdir()
    write_tensors(tmp_path / "long", {"x": np.ones(2)})
    (tmp_path / "long" / "tensors.bin").write_bytes(b"\0" * 12)
    (tmp_path / "short").mkdir()
    save_model(model, tmp_path / "short")
    (tmp_path / "short" / "tensors.bin").write_bytes(blob[:100])
    write_tensors(tmp_path / "dtype", {"x": np.ones(2)})
    man = json.loads((tmp_path / "dtype" / "manifest.json").read_text())
    man["tensors"]["x"]["dtype"] = "float8"
    (tmp_path / "dtype" / "manifest.json").write_text(json.dumps(man))
    write_tensors(tmp_path / "empty", {})
    out = str(tmp_path / "o")
    cases = {
        "missing config": (["quantize", "--config", str(tmp_path / "none.json"), "--out", out], 2),
        "unknown flag": (["compare", "--frobnicate", "--out", out], 2),
        "invalid dims": (["quantize", "--config", str(bad_cfg), "--out", out], 2),
        "manifest mismatch": (["quantize", "--model", str(tmp_path / "long"), "--out", out], 3),
        "truncated": (["quantize", "--model", str(tmp_path / "short"), "--out", out], 4),
        "unknown dtype": (["quantize", "--model", str(tmp_path / "dtype"), "--out", out], 5),
        "empty archive": (["quantize", "--model", str(tmp_path / "empty"), "--out", out], 6),
    }
    codes_ok = True
    for argv, expected in cases.values():
        code = cli_main(argv)
        err = capsys.readouterr().err
        codes_ok &= code == expected and json.loads(err)["exit_code"] == expected
    ok = deterministic and round_trip and codes_ok
    acceptance(9, ok, f"byte-identical reports: {deterministic}; archive round-trip bit-exact: {round_trip}; "
                      f"CLI exit codes 2-6 as documented: {codes_ok}")
    assert ok
