"""Command-line entry point: ``mlpk {train,compress,baseline-rrf,inspect,report}``.

Results go to stdout as ``key=value`` lines; logs go to stderr. Exit codes:
0 success, 2 bad arguments or unreadable inputs, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .baseline import rrf_layers, run_rrf
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import FormatError, load_data
from .network import NetworkSpec, SpecError, count_params, desk_spec, model_size_bytes, vgg16_spec
from .pipeline import train_baseline, run_plan
from .plan import PlanError, load_plan
from .reports import (LAYER_TABLE_HEADER, emit_reports, format_table, layer_table, load_runlog,
                      save_runlog, write_comparison_csv)
from .train import DivergenceError, TrainConfig

log = logging.getLogger("mlpk")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
BUILTIN_SPECS = {"desk": desk_spec, "vgg16": vgg16_spec}


class UsageError(Exception):
    pass


def resolve_spec(arg: str) -> NetworkSpec:
    """A builtin name (``desk``, ``vgg16``) or a path to a spec text file."""
    if arg in BUILTIN_SPECS:
        return BUILTIN_SPECS[arg]()
    path = Path(arg)
    if not path.is_file():
        raise UsageError(f"--spec {arg!r} is neither {sorted(BUILTIN_SPECS)} nor a file")
    return NetworkSpec.from_text(path.read_text())


def final_line(size_before: int, size_after: int, params: int, val_acc: float) -> str:
    ratio = round(size_before / size_after, 2) if size_after else 1.0
    return f"compression={ratio}x params={params} val_acc={val_acc:.4f}"


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"{what} is not finite: {value}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    spec = resolve_spec(args.spec)
    if args.epochs < 0:
        raise UsageError("--epochs must be non-negative")
    data = load_data(args.data, args.seed)
    ws, metrics = train_baseline(spec, data, args.epochs, args.seed, TrainConfig())
    _check_finite(metrics["val_acc"], "val_acc")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", spec, ws)
    (out / "metrics.json").write_text(json.dumps({"seed": args.seed, "epochs": args.epochs, **metrics}, indent=1))
    print(f"val_acc={metrics['val_acc']:.4f}")
    return EXIT_OK


def cmd_compress(args) -> int:
    plan = load_plan(args.plan)
    plan.seed = args.seed
    spec, ws = load_checkpoint(args.checkpoint)
    data = load_data(args.data, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec2, ws2, runlog = run_plan(spec, ws, data, plan, out)
    _check_finite(runlog.metric_after, "val_acc")
    save_checkpoint(out / "final.ckpt", spec2, ws2)
    save_runlog(out / "runlog.json", runlog)
    if runlog.phases:
        emit_reports(runlog, out)
    print(final_line(runlog.size_before, runlog.size_after, runlog.params_after, runlog.metric_after))
    return EXIT_OK


def cmd_baseline_rrf(args) -> int:
    if not 0.0 <= args.fraction < 1.0:
        raise UsageError("--fraction must lie in [0, 1)")
    spec, ws = load_checkpoint(args.checkpoint)
    data = load_data(args.data, args.seed)
    layers = args.layers.split(",") if args.layers else rrf_layers(spec)
    for name in layers:
        if name not in spec or spec[name].kind not in ("conv", "fc"):
            raise UsageError(f"--layers: {name!r} is not a conv/fc layer of the checkpoint")
    cfg = TrainConfig(lr=args.lr, decay_every=0)
    pspec, pws, res = run_rrf(spec, ws, data, args.fraction, args.seed, args.epochs, cfg, layers)
    _check_finite(res.val_acc, "val_acc")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "rrf.ckpt", pspec, pws)
        write_comparison_csv(out / "baseline_comparison.csv",
                             [(f"rrf-{args.fraction}", args.seed, res.params, res.val_acc)])
    print(final_line(model_size_bytes(spec), model_size_bytes(pspec), res.params, res.val_acc))
    return EXIT_OK


def cmd_inspect(args) -> int:
    spec, ws = load_checkpoint(args.checkpoint)
    ref = load_checkpoint(args.reference)[0] if args.reference else None
    print(f"# {args.checkpoint}: tag={ws.tag} params={count_params(spec).total} "
          f"size_mb={model_size_bytes(spec) / 1e6:.4f}")
    print(format_table(LAYER_TABLE_HEADER, layer_table(spec, ref)))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        runlog = load_runlog(args.runlog)
    except (json.JSONDecodeError, TypeError, KeyError) as e:
        raise UsageError(f"cannot read run log {args.runlog}: {e}") from e
    for path in emit_reports(runlog, args.out):
        print(f"wrote={path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42, help="RNG seed (default 42)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="debug logging")

    p = argparse.ArgumentParser(prog="mlpk", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    s = sub.add_parser("train", parents=[common], help="train a baseline model from scratch")
    s.add_argument("--data", required=True, help="'synthetic', 'synthetic:<seed>' or a CIFAR-10 binary dir")
    s.add_argument("--spec", default="desk", help="'desk', 'vgg16' or a spec text file")
    s.add_argument("--epochs", type=int, default=8)
    s.add_argument("--out", required=True, help="output directory (model.ckpt, metrics.json)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compress", parents=[common], help="run a TOML phase plan on a checkpoint")
    s.add_argument("--plan", required=True, help="TOML plan file or a builtin name (desk)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("baseline-rrf", parents=[common], help="random filter removal + retrain")
    s.add_argument("--fraction", type=float, required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=8, help="retraining epochs")
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--layers", default="", help="comma-separated layers (default: all conv/fc)")
    s.add_argument("--out", default="")
    s.set_defaults(func=cmd_baseline_rrf)

    s = sub.add_parser("inspect", parents=[common], help="per-layer filter/param/FLOP table")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--reference", default="", help="original checkpoint to compare against")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("report", parents=[common], help="re-emit CSV reports from runlog.json")
    s.add_argument("--runlog", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _limit_threads():
    n = os.environ.get("MLPK_THREADS")
    if not n:
        return None
    try:
        k = int(n)
    except ValueError:
        raise UsageError(f"MLPK_THREADS must be a positive integer, got {n!r}")
    if k < 1:
        raise UsageError(f"MLPK_THREADS must be a positive integer, got {n!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad args
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        force=True)
    log.info("seed=%d subcommand=%s", args.seed, args.subcommand)
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (DivergenceError, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, PlanError, CheckpointError, FormatError, SpecError, FileNotFoundError,
            IsADirectoryError, ValueError, KeyError) as e:
        print(f"mlpk {args.subcommand}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
