"""Desk-scale reference experiment: baseline, two-phase compression, RRF comparison.

Output layout under ``outdir``::

    base/model.ckpt            trained baseline
    run/                       seed-``seed`` compression run (checkpoints, decisions,
                               reports, runlog.json, final.ckpt, baseline_comparison.csv)
    results.json               headline numbers
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import compare_rrf
from .checkpoint import save_checkpoint
from .data import synth_dataset
from .network import desk_spec
from .pipeline import PhasePlan, run_plan, train_baseline
from .plan import load_plan
from .reports import emit_reports, save_runlog, write_comparison_csv
from .train import TrainConfig

log = logging.getLogger(__name__)

BASELINE_EPOCHS = 8


def finetune_epochs(plan: PhasePlan) -> int:
    """Total epochs the final compressed model trained for after the baseline."""
    return sum(p.l1_epochs + (p.l1_epochs if p.retrain_epochs is None else p.retrain_epochs)
               for p in plan.phases)


def run_desk_experiment(outdir, seed: int = 42, plan: str = "desk",
                        comparison_seeds: Sequence[int] = (42, 43, 44),
                        baseline_epochs: int = BASELINE_EPOCHS) -> dict:
    """Train, compress and compare against RRF at matched parameter counts.

    The method is run once per comparison seed on the same baseline; each
    RRF run is matched to the parameter count of the method run with the
    same seed and retrained for the method's total fine-tuning budget.
    """
    t0 = time.perf_counter()
    out = Path(outdir)
    (out / "base").mkdir(parents=True, exist_ok=True)
    spec, data = desk_spec(), synth_dataset(seed)
    theta, base_metrics = train_baseline(spec, data, baseline_epochs, seed, TrainConfig())
    save_checkpoint(out / "base" / "model.ckpt", spec, theta)

    plan_cfg = load_plan(plan)
    runs = {}
    for s in dict.fromkeys([seed, *comparison_seeds]):
        rundir = out / "run" if s == seed else None
        pspec, pws, runlog = run_plan(spec, theta, data, replace(plan_cfg, seed=s), rundir)
        runs[s] = (pspec, pws, runlog)
    pspec, pws, runlog = runs[seed]
    rundir = out / "run"
    save_checkpoint(rundir / "final.ckpt", pspec, pws)
    save_runlog(rundir / "runlog.json", runlog)
    emit_reports(runlog, rundir)

    epochs = finetune_epochs(plan_cfg)
    rows, method, rrf = [], [], []
    for s in comparison_seeds:
        rl = runs[s][2]
        res = compare_rrf(spec, theta, data, rl.params_after, [s], epochs, plan_cfg.retrain)[0]
        rows += [("method", s, rl.params_after, rl.metric_after),
                 (f"rrf-{res.fraction:.4f}", s, res.params, res.val_acc)]
        method.append((rl.params_after, rl.metric_after))
        rrf.append((res.params, res.val_acc))
    write_comparison_csv(rundir / "baseline_comparison.csv", rows)

    from .cli import final_line
    results = {
        "seed": seed,
        "baseline_val_acc": base_metrics["val_acc"],
        "final_line": final_line(runlog.size_before, runlog.size_after, runlog.params_after, runlog.metric_after),
        "params_before": runlog.params_before,
        "params_after": runlog.params_after,
        "reduction": 1.0 - runlog.params_after / runlog.params_before,
        "val_acc_after": runlog.metric_after,
        "compression": runlog.compression,
        "comparison": {
            "seeds": list(comparison_seeds),
            "finetune_epochs": epochs,
            "method": [{"params": p, "val_acc": a} for p, a in method],
            "rrf": [{"params": p, "val_acc": a} for p, a in rrf],
            "method_mean": float(np.mean([a for _, a in method])),
            "rrf_mean": float(np.mean([a for _, a in rrf])),
            "max_param_gap": max(abs(pr - pm) / pm for (pm, _), (pr, _) in zip(method, rrf)),
        },
        "wall_time": time.perf_counter() - t0,
    }
    (out / "results.json").write_text(json.dumps(results, indent=1))
    log.info("%s", results["final_line"])
    return results
