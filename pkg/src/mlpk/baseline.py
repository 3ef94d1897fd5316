"""Random filter removal (RRF) baseline at a matched parameter budget."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Splits
from .network import NetworkSpec, WeightSet, accuracy, count_params
from .prune import random_prune
from .train import TrainConfig, train

log = logging.getLogger(__name__)


def rrf_layers(spec: NetworkSpec) -> list[str]:
    """Every prunable (non-head) conv and fc layer."""
    return [n for n in spec.weighted_layers if spec[n].kind != "head"]


def params_after_removal(spec: NetworkSpec, counts: dict[str, int]) -> int:
    """Parameter count once ``counts[l]`` filters are removed from each layer ``l``."""
    for layer, n in counts.items():
        spec = spec.replace_layer(layer, out_channels=spec[layer].out_channels - n)
    return count_params(spec).total


def fraction_counts(spec: NetworkSpec, fraction: float, layers: Sequence[str]) -> dict[str, int]:
    return {n: int(np.floor(fraction * spec[n].out_channels)) for n in layers}


def match_counts(spec: NetworkSpec, target: int, layers: Sequence[str] | None = None,
                 iters: int = 40) -> tuple[float, dict[str, int], int]:
    """Per-layer removal counts whose parameter total is closest to ``target``.

    Bisection finds the largest uniform fraction that stays at or above the
    target; single filters are then removed greedily (one more per layer at
    a time, earliest layer first) while that moves the total closer.
    Returns ``(fraction, counts, params)``.
    """
    layers = list(layers) if layers is not None else rrf_layers(spec)
    lo, hi = 0.0, 0.999
    if params_after_removal(spec, fraction_counts(spec, lo, layers)) <= target:
        counts = fraction_counts(spec, lo, layers)
        return lo, counts, params_after_removal(spec, counts)
    for _ in range(iters):
        mid = (lo + hi) / 2
        if params_after_removal(spec, fraction_counts(spec, mid, layers)) >= target:
            lo = mid
        else:
            hi = mid
    counts = fraction_counts(spec, lo, layers)
    best = params_after_removal(spec, counts)
    improved = True
    while improved:
        improved = False
        for layer in layers:
            if counts[layer] + 1 >= spec[layer].out_channels:
                continue
            trial = {**counts, layer: counts[layer] + 1}
            p = params_after_removal(spec, trial)
            if abs(p - target) < abs(best - target):
                counts, best, improved = trial, p, True
    return lo, counts, best


@dataclass
class RRFResult:
    fraction: float
    seed: int
    params: int
    val_acc: float


def run_rrf(spec: NetworkSpec, ws: WeightSet, data: Splits, fraction: float, seed: int,
            epochs: int, cfg: TrainConfig | None = None, layers: Sequence[str] | None = None,
            counts: dict[str, int] | None = None) -> tuple[NetworkSpec, WeightSet, RRFResult]:
    """Randomly remove filters from ``ws`` and retrain for ``epochs``."""
    layers = list(layers) if layers is not None else rrf_layers(spec)
    cfg = cfg or TrainConfig(lr=0.001, decay_every=0)
    pspec, pws, _ = random_prune(spec, ws, fraction, layers, seed, counts)
    pws, _ = train(pspec, pws, data.train, TrainConfig(**{**asdict(cfg), "epochs": epochs, "seed": seed}))
    res = RRFResult(fraction, seed, count_params(pspec).total, accuracy(pspec, pws, data.val))
    log.info("rrf fraction=%.3f seed=%d params=%d val_acc=%.2f", fraction, seed, res.params, res.val_acc)
    return pspec, pws, res


def compare_rrf(spec: NetworkSpec, ws: WeightSet, data: Splits, target_params: int,
                seeds: Sequence[int], epochs: int, cfg: TrainConfig | None = None,
                tolerance: float = 0.05) -> list[RRFResult]:
    """RRF runs at the budget matching ``target_params``, one per seed."""
    fraction, counts, params = match_counts(spec, target_params)
    if abs(params - target_params) > tolerance * target_params:
        log.warning("closest RRF budget %d is outside %.0f%% of %d", params, 100 * tolerance, target_params)
    return [run_rrf(spec, ws, data, fraction, s, epochs, cfg, counts=counts)[2] for s in seeds]
