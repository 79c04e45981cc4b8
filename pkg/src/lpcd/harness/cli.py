"""Command line entry point: ``lpcd {quantize, compare, sweep-trace, gen-model}``.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage, config, or dims error (bad flag, unreadable config, invalid value)
    3  archive manifest/blob mismatch
    4  truncated archive
    5  unknown dtype in archive
    6  empty archive

Every nonzero exit writes one JSON object ``{"error", "message", "exit_code"}``
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from lpcd.harness.archive import ArchiveError, load_model, save_model
from lpcd.harness.model import ModelDims, ToyModel, gen_toy_model
from lpcd.harness.pipeline import COMPENSATIONS, METHODS, QUANTIZERS, PipelineConfig, RunReport, run_cell

EXIT_USAGE = 2
CSV_COLUMNS = ("block", "method", "bits", "seed", "mse")


class UsageError(Exception):
    code = EXIT_USAGE
    kind = "usage_error"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print text and exit(2)
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config; explicit flags override its keys")
    p.add_argument("--seed", type=int, help="seed for model, calibration, evaluation and optimizer streams")
    p.add_argument("--model", type=Path, help="load weights from a tensor archive instead of generating them")
    p.add_argument("--bits", type=int)
    p.add_argument("--alpha", type=float, help="QEP strength (tuning grids usually step by 0.1)")
    p.add_argument("--beta", type=float, help="residual correction strength (tuning grids usually step by 0.05)")
    p.add_argument("--sweeps", type=int, help="LPCD sweeps per submodule; 0 keeps the LoaQ initialization")
    p.add_argument("--damping-fraction", type=float)
    p.add_argument("--lr", type=float, help="Adam initial step for gradient relaxations")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="sequences per Adam mini-batch")
    p.add_argument("--mask-orientation", choices=("lower", "upper"))
    p.add_argument("--skip-last", type=int, help="leave the last K blocks in full precision")
    p.add_argument("--calib-seqs", type=int)
    p.add_argument("--eval-seqs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lpcd", description="Layer-projected coordinate descent on seeded toy transformers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="run one pipeline; write report.json and blocks.csv")
    _add_common(q)
    q.add_argument("--method", help=f"compensation {COMPENSATIONS} or quantizer+compensation, e.g. gptq+lpcd")
    q.add_argument("--quantizer", choices=QUANTIZERS)
    q.add_argument("--out", type=Path, required=True, help="output directory")
    q.add_argument("--include-timing", action="store_true", help="add wall_clock to report.json")

    c = sub.add_parser("compare", help="run a method matrix over several seeds; write one CSV")
    _add_common(c)
    c.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at --seed")
    c.add_argument("--methods", help="comma-separated quantizer+compensation labels (default: all)")
    c.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    c.add_argument("--out", type=Path, required=True, help="CSV path")

    t = sub.add_parser("sweep-trace", help="run LPCD and dump the objective log")
    _add_common(t)
    t.add_argument("--quantizer", choices=QUANTIZERS)
    t.add_argument("--out", type=Path, required=True, help="CSV path")

    g = sub.add_parser("gen-model", help="write a seeded toy model as a tensor archive")
    g.add_argument("--config", type=Path)
    g.add_argument("--seed", type=int)
    g.add_argument("--init-scale", type=float, default=1.0)
    g.add_argument("--out", type=Path, required=True, help="archive directory")
    return parser


def _read_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    return data


def _split_method(label: str) -> dict:
    if "+" in label:
        q, c = label.split("+", 1)
        return {"quantizer": q, "method": c}
    return {"method": label}


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Merge the JSON config with flag overrides into a validated config."""
    d = _read_config(args.config)
    if isinstance(d.get("method"), str):
        d.update(_split_method(d["method"]))
    flags = {
        "seed": "seed",
        "bits": "bits",
        "alpha": "alpha",
        "beta": "beta",
        "sweeps": "sweeps",
        "damping_fraction": "damping_fraction",
        "mask_orientation": "mask_orientation",
        "skip_last": "skip_last",
        "calib_seqs": "calib_seqs",
        "eval_seqs": "eval_seqs",
        "quantizer": "quantizer",
    }
    for attr, key in flags.items():
        val = getattr(args, attr, None)
        if val is not None:
            d[key] = val
    if getattr(args, "method", None):
        d.update(_split_method(args.method))
    opt = dict(d.get("optimizer") or {})
    for attr, key in (("lr", "lr"), ("epochs", "epochs"), ("batch", "batch_size")):
        val = getattr(args, attr, None)
        if val is not None:
            if key == "batch_size":
                opt.pop("batch", None)
            opt[key] = val
    if opt:
        d["optimizer"] = opt
    try:
        return PipelineConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _model_for(config: PipelineConfig, model_path: Path | None) -> ToyModel:
    if model_path is not None:
        model = load_model(model_path)
        if model.dims != config.dims:
            raise UsageError("archive dims differ from config dims")
        return model
    return gen_toy_model(config.seed, config.dims)


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "mse": repr(float(r["mse"]))})
    return buf.getvalue()


def _cell(args: tuple[PipelineConfig, Path | None]) -> RunReport:
    config, model_path = args
    return run_cell(_model_for(config, model_path), config)[1]


def cmd_quantize(args) -> None:
    config = resolve_config(args)
    report = _cell((config, args.model))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json(args.include_timing))
    (args.out / "blocks.csv").write_text(_csv(report.rows()))


def cmd_compare(args) -> None:
    base = resolve_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    labels = METHODS if not args.methods else tuple(m.strip() for m in args.methods.split(",") if m.strip())
    cells = []
    for s in range(base.seed, base.seed + args.seeds):
        for label in labels:
            if label not in METHODS:
                raise UsageError(f"unknown method {label!r}; expected one of {METHODS}")
            cells.append((replace(base, seed=s, **_split_method(label)), args.model))
    if args.jobs == 1:
        reports = [_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            reports = list(ex.map(_cell, cells))  # map preserves submission order
    rows = [r for rep in reports for r in rep.rows()]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(_csv(rows))


def cmd_sweep_trace(args) -> None:
    config = replace(resolve_config(args), method="lpcd")
    report = _cell((config, args.model))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(report.trace_csv())


def cmd_gen_model(args) -> None:
    d = _read_config(args.config)
    try:
        dims = ModelDims(**d.get("dims", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid dims: {exc}") from exc
    seed = args.seed if args.seed is not None else int(d.get("seed", 0))
    save_model(gen_toy_model(seed, dims, args.init_scale), args.out)


COMMANDS = {
    "quantize": cmd_quantize,
    "compare": cmd_compare,
    "sweep-trace": cmd_sweep_trace,
    "gen-model": cmd_gen_model,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except (UsageError, ArchiveError) as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except Exception as exc:  # noqa: BLE001 - surface as JSON instead of a traceback
        return _fail("internal_error", f"{type(exc).__name__}: {exc}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
