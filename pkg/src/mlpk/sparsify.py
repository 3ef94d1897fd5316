"""Sparsity induction: L1-regularised training, alpha search and global thresholding."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .network import Batch, NetworkSpec, WeightSet, accuracy
from .train import TrainConfig, train

log = logging.getLogger(__name__)

DEFAULT_EPS1 = 2.5
DEFAULT_EPS2 = 6.0
THRESHOLD_STEPS = 40  # t in {0.05, 0.10, ..., 2.00} * sigma
ALPHA_GRID = tuple(float(a) for a in np.logspace(-4, -1, 8))

MetricFn = Callable[[NetworkSpec, WeightSet], float]


@dataclass
class SparsityConfig:
    layer_set: list[str]
    alpha: float = 0.0
    eps1: float = DEFAULT_EPS1
    eps2: float = DEFAULT_EPS2
    threshold: float = 0.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5))

    def __post_init__(self):
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("eps1 and eps2 must be non-negative")
        if self.alpha < 0 or self.threshold < 0:
            raise ValueError("alpha and threshold must be non-negative")


def check_layer_set(spec: NetworkSpec, layers: Sequence[str]) -> None:
    """``layers`` must be a non-empty contiguous run of non-head weighted layers."""
    if not layers:
        raise ValueError("layer set is empty")
    chain = [n for n in spec.weighted_layers if spec[n].kind != "head"]
    for name in layers:
        if name not in chain:
            raise ValueError(f"layer {name!r} is not a prunable conv/fc layer")
    start = chain.index(layers[0])
    if list(layers) != chain[start:start + len(layers)]:
        raise ValueError(f"layer set {list(layers)} is not a contiguous run of {chain}")


def validation_metric(data: Batch) -> MetricFn:
    return lambda spec, ws: accuracy(spec, ws, data)


def train_l1(spec: NetworkSpec, ws: WeightSet, data: Batch, cfg: SparsityConfig) -> WeightSet:
    """Fine-tune on cross-entropy + alpha * sum of |w| over the layer set."""
    check_layer_set(spec, cfg.layer_set)
    out, _ = train(spec, ws, data, cfg.train, alpha=cfg.alpha, l1_layers=cfg.layer_set)
    return out.replace(tag="theta_L1", layer_set=tuple(cfg.layer_set), threshold=None)


@dataclass
class AlphaSearch:
    alpha: float
    weights: WeightSet
    history: list[tuple[float, float]]  # (alpha, val metric)
    baseline: float
    warning: bool = False


def select_alpha(spec: NetworkSpec, ws: WeightSet, data: Batch, eps1: float,
                 candidate_grid: Sequence[float], cfg: SparsityConfig,
                 metric: MetricFn) -> AlphaSearch:
    """Largest alpha whose L1-trained model stays within ``eps1`` of the input model.

    Every candidate is trained from ``ws`` with the same seed. When none
    qualifies the smallest alpha is returned with ``warning`` set.
    """
    grid = list(candidate_grid)
    if not grid:
        raise ValueError("candidate grid is empty")
    if grid != sorted(grid):
        raise ValueError("candidate grid must be ascending")
    base = metric(spec, ws)
    history, best, first = [], None, None
    for a in grid:
        w = train_l1(spec, ws, data, _with_alpha(cfg, a))
        p = metric(spec, w)
        history.append((a, p))
        log.info("alpha=%.3g val=%.2f (base %.2f)", a, p, base)
        first = first or (a, w)
        if p >= base - eps1:
            best = (a, w)
    if best is None:
        log.warning("no alpha satisfies eps1=%s; using smallest candidate %g", eps1, grid[0])
        return AlphaSearch(first[0], first[1], history, base, warning=True)
    return AlphaSearch(best[0], best[1], history, base)


def _with_alpha(cfg: SparsityConfig, alpha: float) -> SparsityConfig:
    return SparsityConfig(cfg.layer_set, alpha, cfg.eps1, cfg.eps2, cfg.threshold, cfg.train)


def apply_threshold(ws: WeightSet, layers: Sequence[str], t: float) -> WeightSet:
    """Zero every weight in ``layers`` with ``|w| < t``; biases and other layers are untouched."""
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    out = ws.copy()
    for name in layers:
        w = out.weights[name]
        w[np.abs(w) < t] = 0
    return out.replace(tag="theta_L1_th", layer_set=tuple(layers), threshold=float(t))


def pooled_std(ws: WeightSet, layers: Sequence[str]) -> float:
    flat = np.concatenate([ws.weights[n].ravel() for n in layers]).astype(np.float64)
    return float(flat.std())


def threshold_grid(sigma: float, steps: int = THRESHOLD_STEPS) -> list[float]:
    return [sigma * 0.05 * k for k in range(1, steps + 1)]


@dataclass
class ThresholdSearch:
    threshold: float
    sigma: float
    rows: list[tuple[float, int, float]]  # (t, nonzero count over L, val metric)
    reference: float
    warning: bool = False


def search_threshold(spec: NetworkSpec, ws: WeightSet, layers: Sequence[str], eps2: float,
                     metric: MetricFn) -> ThresholdSearch:
    """Largest grid threshold keeping the metric within ``eps2`` of the unthresholded model.

    The grid is 0.05..2.00 times the standard deviation of all weights in
    ``layers`` pooled together, so one threshold serves the whole set.
    """
    if eps2 < 0:
        raise ValueError("eps2 must be non-negative")
    ref = metric(spec, ws)
    sigma = pooled_std(ws, layers)
    rows, best = [], None
    for t in threshold_grid(sigma):
        th = apply_threshold(ws, layers, t)
        p = metric(spec, th)
        nz = sum(int(np.count_nonzero(th.weights[n])) for n in layers)
        rows.append((t, nz, p))
        if p >= ref - eps2:
            best = t
    if best is None:
        log.warning("no threshold satisfies eps2=%s; using t=0", eps2)
        return ThresholdSearch(0.0, sigma, rows, ref, warning=True)
    return ThresholdSearch(best, sigma, rows, ref)


def layerwise_thresholds(spec: NetworkSpec, ws: WeightSet, layers: Sequence[str], eps2: float,
                         metric: MetricFn) -> dict[str, float]:
    """Per-layer thresholds, each searched on its own layer's sigma (comparison mode)."""
    return {name: search_threshold(spec, ws, [name], eps2, metric).threshold for name in layers}


def apply_layerwise(ws: WeightSet, thresholds: dict[str, float]) -> WeightSet:
    out = ws
    for name, t in thresholds.items():
        out = apply_threshold(out, [name], t)
    return out.replace(layer_set=tuple(thresholds), threshold=None)


def near_zero_fraction(ws: WeightSet, layers: Sequence[str], tol: float = 1e-3) -> float:
    flat = np.concatenate([ws.weights[n].ravel() for n in layers])
    return float(np.mean(np.abs(flat) < tol))


def median_abs(ws: WeightSet, layers: Sequence[str]) -> float:
    return float(np.median(np.abs(np.concatenate([ws.weights[n].ravel() for n in layers]))))

