"""Multi-phase orchestration: induce sparsity, select, prune, retrain."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sparsify as sp
from .data import Splits
from .network import (NetworkSpec, WeightSet, accuracy, count_flops, count_nonzero, count_params,
                      init_weights, model_size_bytes)
from .prune import (PruneDecision, SelectionThresholds, prune_fc_neurons, prune_filters,
                    select_filters, drop_tail_layers, write_decisions)
from .train import TrainConfig, train

log = logging.getLogger(__name__)

HIST_BINS = 100


@dataclass
class Phase:
    """One induce/select/prune/retrain pass over a contiguous layer set.

    ``alpha``/``threshold`` of ``None`` mean "search". Conv layers in
    ``layers`` go through filter selection; fc layers through neuron pruning.
    """

    layers: list[str]
    alpha: float | None = None
    alpha_grid: Sequence[float] = sp.ALPHA_GRID
    eps1: float = sp.DEFAULT_EPS1
    eps2: float = sp.DEFAULT_EPS2
    threshold: float | None = None
    selection: SelectionThresholds = field(default_factory=SelectionThresholds)
    l1_epochs: int = 5
    retrain_epochs: int | None = None
    progressive: bool = True
    compare_layerwise: bool = False
    drop_tail_after: str | None = None


@dataclass
class PhasePlan:
    phases: list[Phase] = field(default_factory=list)
    seed: int = 42
    train: TrainConfig = field(default_factory=TrainConfig)
    # optimiser for the post-pruning retrain; epochs come from each phase
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.001, decay_every=0))


@dataclass
class PhaseRecord:
    index: int
    layers: list[str]
    seed: int
    metric_before: float
    metric_l1: float
    metric_th: float
    metric_pruned: float
    metric_after: float
    alpha: float
    alpha_history: list
    alpha_warning: bool
    threshold: float
    sigma: float
    threshold_rows: list
    threshold_warning: bool
    nonzero_before: dict
    nonzero_l1: dict
    nonzero_after: dict
    histograms: dict
    decisions: list
    filters_before: dict
    filters_after: dict
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    wall_time: float
    layerwise: dict | None = None


@dataclass
class RunLog:
    seed: int
    data: dict
    spec_before: str
    spec_after: str = ""
    metric_before: float = 0.0
    metric_after: float = 0.0
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    size_before: int = 0
    size_after: int = 0
    phases: list[PhaseRecord] = field(default_factory=list)

    @property
    def compression(self) -> float:
        return self.size_before / self.size_after if self.size_after else 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunLog":
        d = dict(d)
        d["phases"] = [PhaseRecord(**p) for p in d.get("phases", [])]
        return cls(**d)


def histogram(pre: np.ndarray, post: np.ndarray, bins: int = HIST_BINS) -> dict:
    """Counts of ``pre`` and ``post`` on shared uniform bins over their joint range."""
    lo = float(min(pre.min(), post.min()))
    hi = float(max(pre.max(), post.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return {"edges": edges.tolist(),
            "pre": np.histogram(pre, edges)[0].tolist(),
            "post": np.histogram(post, edges)[0].tolist()}


def _filters(spec: NetworkSpec) -> dict[str, int]:
    return {n: spec[n].out_channels for n in spec.weighted_layers}


def _decision_rows(decisions: list[PruneDecision]) -> list[dict]:
    return [asdict(d) for d in decisions]


def train_baseline(spec: NetworkSpec, data: Splits, epochs: int, seed: int = 42,
                   cfg: TrainConfig | None = None) -> tuple[WeightSet, dict]:
    """Train from a seeded fan-in uniform initialisation on the original loss."""
    cfg = cfg or TrainConfig()
    cfg = TrainConfig(**{**asdict(cfg), "epochs": epochs, "seed": seed})
    ws = init_weights(spec, seed)
    ws, hist = train(spec, ws, data.train, cfg)
    metrics = {"train_acc": accuracy(spec, ws, data.train), "val_acc": accuracy(spec, ws, data.val),
               "loss_history": hist}
    log.info("baseline: val_acc=%.2f", metrics["val_acc"])
    return ws, metrics


def run_phase(spec: NetworkSpec, ws: WeightSet, data: Splits, phase: Phase, index: int = 0,
              seed: int = 42, train_cfg: TrainConfig | None = None,
              retrain_cfg: TrainConfig | None = None,
              skip: Sequence[str] = (), outdir: Path | None = None):
    """Sparsity induction, global thresholding, filter selection, surgery and retraining."""
    t0 = time.perf_counter()
    train_cfg = train_cfg or TrainConfig()
    retrain_cfg = retrain_cfg or train_cfg
    L = list(phase.layers)
    sp.check_layer_set(spec, L)
    metric = sp.validation_metric(data.val)
    phase_seed = seed + 1000 * index
    l1_cfg = TrainConfig(**{**asdict(train_cfg), "epochs": phase.l1_epochs, "seed": phase_seed})
    cfg = sp.SparsityConfig(L, phase.alpha or 0.0, phase.eps1, phase.eps2, phase.threshold or 0.0, l1_cfg)

    metric_before = metric(spec, ws)
    if phase.alpha is None:
        search = sp.select_alpha(spec, ws, data.train, phase.eps1, phase.alpha_grid, cfg, metric)
        theta_l1, alpha = search.weights, search.alpha
        alpha_history, alpha_warning = search.history, search.warning
    else:
        theta_l1, alpha = sp.train_l1(spec, ws, data.train, cfg), phase.alpha
        alpha_history, alpha_warning = [(alpha, metric(spec, theta_l1))], False
    metric_l1 = metric(spec, theta_l1)

    if phase.threshold is None:
        ts = sp.search_threshold(spec, theta_l1, L, phase.eps2, metric)
    else:
        ts = sp.ThresholdSearch(phase.threshold, sp.pooled_std(theta_l1, L), [], metric_l1)
    t = ts.threshold
    theta_th = sp.apply_threshold(theta_l1, L, t)
    metric_th = metric(spec, theta_th)

    conv_layers = [n for n in L if spec[n].kind == "conv" and n not in skip]
    fc_layers = [n for n in L if spec[n].kind == "fc" and n not in skip]
    decisions = select_filters(spec, theta_th, conv_layers, phase.selection, phase.progressive)
    new_spec, theta_c = prune_filters(spec, theta_l1, decisions)
    if fc_layers:
        _, th_c = prune_filters(spec, theta_th, decisions)
        new_spec, theta_c, fc_dec = prune_fc_neurons(new_spec, th_c, theta_c, fc_layers)
        decisions = decisions + fc_dec
    if phase.drop_tail_after:
        new_spec, theta_c = drop_tail_layers(new_spec, theta_c, phase.drop_tail_after)
    metric_pruned = metric(new_spec, theta_c)

    retrain_epochs = phase.l1_epochs if phase.retrain_epochs is None else phase.retrain_epochs
    rt_cfg = TrainConfig(**{**asdict(retrain_cfg), "epochs": retrain_epochs, "seed": phase_seed + 1})
    theta_c, _ = train(new_spec, theta_c, data.train, rt_cfg)
    theta_c = theta_c.replace(tag="theta_c", layer_set=(), threshold=None)
    metric_after = metric(new_spec, theta_c)

    layerwise = None
    if phase.compare_layerwise:
        layerwise = compare_threshold_modes(spec, theta_l1, L, conv_layers, phase, t, metric)

    record = PhaseRecord(
        index=index, layers=L, seed=phase_seed,
        metric_before=metric_before, metric_l1=metric_l1, metric_th=metric_th,
        metric_pruned=metric_pruned, metric_after=metric_after,
        alpha=float(alpha), alpha_history=[list(map(float, r)) for r in alpha_history],
        alpha_warning=alpha_warning,
        threshold=float(t), sigma=ts.sigma, threshold_rows=[list(r) for r in ts.rows],
        threshold_warning=ts.warning,
        nonzero_before=count_nonzero(ws, L), nonzero_l1=count_nonzero(theta_l1, L),
        nonzero_after=count_nonzero(theta_th, L),
        histograms={n: histogram(ws.weights[n], theta_l1.weights[n]) for n in L},
        decisions=_decision_rows(decisions),
        filters_before=_filters(spec), filters_after=_filters(new_spec),
        params_before=count_params(spec).total, params_after=count_params(new_spec).total,
        flops_before=count_flops(spec).total, flops_after=count_flops(new_spec).total,
        wall_time=time.perf_counter() - t0, layerwise=layerwise,
    )
    log.info("phase %d: t=%.4g alpha=%.3g params %d -> %d, val %.2f -> %.2f", index, t, alpha,
             record.params_before, record.params_after, metric_before, metric_after)
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
        write_decisions(outdir / f"decisions_phase{index}.csv", decisions)
        from .reports import write_threshold_csv
        write_threshold_csv(outdir / f"threshold_phase{index}.csv", ts.rows)
    return new_spec, theta_c, record


def compare_threshold_modes(spec, theta_l1, L, conv_layers, phase: Phase, t_setwise: float, metric) -> dict:
    """Filters removed under one global threshold vs independent per-layer thresholds."""
    per_layer = sp.layerwise_thresholds(spec, theta_l1, L, phase.eps2, metric)
    th_lw = sp.apply_layerwise(theta_l1, per_layer)
    th_sw = sp.apply_threshold(theta_l1, L, t_setwise)
    out = {"layerwise_thresholds": per_layer}
    for mode, th in (("setwise", th_sw), ("layerwise", th_lw)):
        dec = select_filters(spec, th, conv_layers, phase.selection, phase.progressive)
        pspec, _ = prune_filters(spec, theta_l1, dec)
        out[mode] = {"metric_th": metric(spec, th),
                     "filters_removed": sum(len(d.indices) for d in dec),
                     "params_after": count_params(pspec).total}
    return out


def run_plan(spec: NetworkSpec, ws: WeightSet, data: Splits, plan: PhasePlan,
             outdir: str | Path | None = None) -> tuple[NetworkSpec, WeightSet, RunLog]:
    """Execute every phase in order; a layer pruned in one phase is not pruned again later."""
    from .checkpoint import save_checkpoint

    outdir = Path(outdir) if outdir is not None else None
    runlog = RunLog(seed=plan.seed, data=dict(data.meta), spec_before=spec.to_text(),
                    metric_before=accuracy(spec, ws, data.val),
                    params_before=count_params(spec).total, flops_before=count_flops(spec).total,
                    size_before=model_size_bytes(spec))
    pruned: set[str] = set()
    for k, phase in enumerate(plan.phases):
        skip = [n for n in phase.layers if n in pruned]
        spec, ws, record = run_phase(spec, ws, data, phase, k, plan.seed, plan.train, plan.retrain, skip, outdir)
        pruned.update(phase.layers)
        runlog.phases.append(record)
        if outdir is not None:
            save_checkpoint(outdir / f"phase{k}.ckpt", spec, ws)
    runlog.spec_after = spec.to_text()
    runlog.metric_after = accuracy(spec, ws, data.val)
    runlog.params_after = count_params(spec).total
    runlog.flops_after = count_flops(spec).total
    runlog.size_after = model_size_bytes(spec)
    return spec, ws, runlog
