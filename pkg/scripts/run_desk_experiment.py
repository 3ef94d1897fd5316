#!/usr/bin/env python3
"""Run the desk-scale experiment: baseline, two-phase compression, RRF comparison.

Writes checkpoints, CSV reports and results.json under the output directory
and prints the headline numbers.
"""
import argparse
import logging

from mlpk.experiment import run_desk_experiment


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("outdir", nargs="?", default="runs/desk")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--plan", default="desk", help="builtin plan name or TOML path")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    res = run_desk_experiment(args.outdir, seed=args.seed, plan=args.plan)
    c = res["comparison"]
    print(f"baseline_val_acc={res['baseline_val_acc']:.4f}")
    print(f"reduction={res['reduction']:.4f} params={res['params_before']}->{res['params_after']}")
    print(f"method_mean={c['method_mean']:.4f} rrf_mean={c['rrf_mean']:.4f} "
          f"max_param_gap={c['max_param_gap']:.4f}")
    print(f"wall_time={res['wall_time']:.1f}")
    print(res["final_line"])


if __name__ == "__main__":
    main()
