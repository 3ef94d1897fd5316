"""Filter selection from zero-row statistics and structural surgery."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .network import (LayerSpec, NetworkSpec, SpecError, WeightSet, consumers_of,
                      conv_successor, count_params, init_weights)

log = logging.getLogger(__name__)

REASONS = ("cond1", "cond2", "random_baseline", "fc_incoming", "fc_outgoing")


@dataclass(frozen=True)
class SelectionThresholds:
    s_f: float = 0.9
    s_f_prime: float = 0.85
    s_g: float = 0.95

    def __post_init__(self):
        for v in (self.s_f, self.s_f_prime, self.s_g):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"selection thresholds must lie in [0,1], got {self}")
        if not self.s_f > self.s_f_prime:
            raise ValueError(f"s_f ({self.s_f}) must exceed s_f_prime ({self.s_f_prime})")


@dataclass
class FilterSlice:
    """Filter ``i`` of a layer (F) and the successor weights reading its output (G)."""

    f: np.ndarray
    g: np.ndarray | None = None


@dataclass
class PruneDecision:
    layer: str
    indices: list[int]
    reasons: list[str] = field(default_factory=list)
    splevel_f: list[float] = field(default_factory=list)
    splevel_g: list[float | None] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError(f"duplicate filter indices for {self.layer!r}")
        order = np.argsort(self.indices, kind="stable")
        self.indices = [int(self.indices[i]) for i in order]
        for name in ("reasons", "splevel_f", "splevel_g"):
            vals = getattr(self, name)
            if vals:
                setattr(self, name, [vals[i] for i in order])


def sparsity_level(block: np.ndarray) -> float:
    """Fraction of all-zero rows, a row being a vector along the last axis."""
    rows = block.reshape(-1, block.shape[-1])
    if rows.shape[0] == 0:
        return 0.0
    return float(np.count_nonzero(~rows.any(axis=1))) / rows.shape[0]


def _row_sparsity(w: np.ndarray, axis: int) -> np.ndarray:
    """sparsity_level of every slice ``w.take(i, axis)``, vectorised."""
    zero_rows = ~w.any(axis=-1)  # drops the kernel-column axis
    other = tuple(a for a in range(zero_rows.ndim) if a != axis)
    return zero_rows.sum(axis=other) / np.prod([zero_rows.shape[a] for a in other])


def filter_slices(spec: NetworkSpec, ws: WeightSet, layer: str) -> list[FilterSlice]:
    succ = conv_successor(spec, layer)
    w = ws.weights[layer]
    g = ws.weights[succ] if succ else None
    return [FilterSlice(w[i], g[:, i] if g is not None else None) for i in range(w.shape[0])]


# ---------------------------------------------------------------------------
# surgery

def remove_channels(spec: NetworkSpec, weight_sets: Sequence[WeightSet], layer: str,
                    indices: Sequence[int]) -> NetworkSpec:
    """Delete output channels ``indices`` of ``layer`` and every input slice reading them.

    Mutates ``weight_sets`` in place and returns the resized spec.
    """
    spec_layer = spec[layer]
    if spec_layer.kind not in ("conv", "fc"):
        raise SpecError(f"cannot remove output channels of {spec_layer.kind} layer {layer!r}")
    idx = sorted(set(int(i) for i in indices))
    if not idx:
        return spec
    c = spec_layer.out_channels
    if idx[0] < 0 or idx[-1] >= c:
        raise IndexError(f"filter index out of range for {layer!r} with {c} filters")
    if len(idx) >= c:
        raise ValueError(f"pruning {len(idx)} of {c} filters would empty layer {layer!r}")
    consumers = consumers_of(spec, layer)
    for ws in weight_sets:
        ws.weights[layer] = np.delete(ws.weights[layer], idx, axis=0)
        ws.biases[layer] = np.delete(ws.biases[layer], idx, axis=0)
        for name, rule in consumers:
            ws.weights[name] = np.delete(ws.weights[name], rule.columns_for(idx), axis=1)
    return spec.replace_layer(layer, out_channels=c - len(idx))


def removed_params(spec: NetworkSpec, layer: str, n: int) -> int:
    """Closed-form parameter delta of removing ``n`` channels from ``layer``."""
    per_filter = int(np.prod(spec.weight_shape(layer)[1:])) + 1
    sliced = 0
    for name, rule in consumers_of(spec, layer):
        shape = spec.weight_shape(name)
        sliced += shape[0] * rule.block * int(np.prod(shape[2:], dtype=np.int64))
    return n * (per_filter + sliced)


def prune_filters(spec: NetworkSpec, theta_l1: WeightSet,
                  decisions: Iterable[PruneDecision]) -> tuple[NetworkSpec, WeightSet]:
    """Structurally remove the decided filters, copying surviving values from ``theta_l1``."""
    out = theta_l1.copy()
    for d in decisions:
        before = count_params(spec).total
        delta = removed_params(spec, d.layer, len(d.indices))
        spec = remove_channels(spec, [out], d.layer, d.indices)
        after = count_params(spec).total
        if before - after != delta:
            raise AssertionError(f"parameter recount mismatch after pruning {d.layer}: "
                                 f"{before - after} != {delta}")
    out.check(spec)
    return spec, out.replace(tag="theta_c", threshold=None)


# ---------------------------------------------------------------------------
# selection

def select_filters(spec: NetworkSpec, theta_th: WeightSet, layers: Sequence[str],
                   thresholds: SelectionThresholds = SelectionThresholds(),
                   progressive: bool = True) -> list[PruneDecision]:
    """Pick filters to remove layer by layer from zero-row sparsity levels.

    A filter goes if its own sparsity reaches ``s_f``, or if it reaches
    ``s_f_prime`` and the slice of the next conv layer reading it reaches
    ``s_g``. With ``progressive`` the thresholded weights are shrunk after each
    layer, so later layers see the already-reduced tensors; otherwise every
    layer is scored against the original snapshot. Layers without a conv
    successor are scored on their own sparsity only.
    """
    work = theta_th.copy()
    wspec = spec
    decisions = []
    for layer in layers:
        if spec[layer].kind != "conv":
            raise SpecError(f"filter selection applies to conv layers, got {layer!r}")
        src, sspec = (work, wspec) if progressive else (theta_th, spec)
        w = src.weights[layer]
        succ = conv_successor(sspec, layer)
        lev_f = _row_sparsity(w, axis=0)
        lev_g = _row_sparsity(src.weights[succ], axis=1) if succ else None
        d = PruneDecision(layer, [])
        for i in range(w.shape[0]):
            f, g = float(lev_f[i]), (float(lev_g[i]) if lev_g is not None else None)
            reason = None
            if f >= thresholds.s_f_prime:
                if f >= thresholds.s_f:
                    reason = "cond1"
                elif g is not None and g >= thresholds.s_g:
                    reason = "cond2"
            if reason:
                d.indices.append(i)
                d.reasons.append(reason)
                d.splevel_f.append(f)
                d.splevel_g.append(g)
        if len(d.indices) == w.shape[0]:
            keep = int(np.argmin(lev_f))
            log.warning("all %d filters of %s qualify; keeping filter %d", w.shape[0], layer, keep)
            j = d.indices.index(keep)
            for lst in (d.indices, d.reasons, d.splevel_f, d.splevel_g):
                del lst[j]
        decisions.append(PruneDecision(layer, d.indices, d.reasons, d.splevel_f, d.splevel_g))
        if progressive and d.indices:
            wspec = remove_channels(wspec, [work], layer, d.indices)
    return decisions


def prune_fc_neurons(spec: NetworkSpec, theta_th: WeightSet, theta_l1: WeightSet,
                     fc_layers: Sequence[str]) -> tuple[NetworkSpec, WeightSet, list[PruneDecision]]:
    """Remove fc neurons whose incoming row or outgoing column is entirely zero in ``theta_th``."""
    th, out = theta_th.copy(), theta_l1.copy()
    decisions = []
    for layer in fc_layers:
        if spec[layer].kind != "fc":
            raise SpecError(f"{layer!r} is not an fc layer")
        w = th.weights[layer]
        incoming = ~w.any(axis=1)
        cons = consumers_of(spec, layer)
        outgoing = np.ones(w.shape[0], dtype=bool) if cons else np.zeros(w.shape[0], dtype=bool)
        for name, rule in cons:
            cw = th.weights[name]
            outgoing &= np.array([not cw[:, rule.columns(j)].any() for j in range(w.shape[0])])
        d = PruneDecision(layer, [])
        for j in range(w.shape[0]):
            if incoming[j] or outgoing[j]:
                d.indices.append(j)
                d.reasons.append("fc_incoming" if incoming[j] else "fc_outgoing")
                d.splevel_f.append(1.0 if incoming[j] else 0.0)
                d.splevel_g.append(1.0 if outgoing[j] else 0.0)
        if len(d.indices) == w.shape[0]:
            raise ValueError(f"every neuron of {layer!r} is disconnected; refusing to empty the layer")
        _fold_constant_neurons(spec, out, layer, [j for j in d.indices if incoming[j] and not outgoing[j]])
        spec = remove_channels(spec, [th, out], layer, d.indices)
        decisions.append(d)
    out.check(spec)
    return spec, out.replace(tag="theta_c", threshold=None), decisions


def _relu_between(spec: NetworkSpec, src: str, dst: str) -> bool:
    """Whether the (unweighted) path from ``src`` to its consumer ``dst`` applies a relu."""
    def walk(node: str, seen_relu: bool):
        for c in spec.direct_consumers(node):
            if c == dst:
                return seen_relu
            if not spec[c].weighted:
                r = walk(c, seen_relu or spec[c].kind == "relu")
                if r is not None:
                    return r
        return None
    return bool(walk(src, False))


def _fold_constant_neurons(spec: NetworkSpec, ws: WeightSet, layer: str, idx: Sequence[int]) -> None:
    """Move the constant output of neurons with no incoming weights into consumer biases.

    Such a neuron emits ``act(b_j)`` for every input, so adding
    ``W_next[:, j] * act(b_j)`` to the consumer bias keeps outputs unchanged
    once the neuron is deleted.
    """
    if not idx:
        return
    b = ws.biases[layer]
    for name, rule in consumers_of(spec, layer):
        const = b[list(idx)]
        if _relu_between(spec, layer, name):
            const = np.maximum(const, 0)
        cw = ws.weights[name]
        cols = rule.columns_for(idx)
        vals = np.repeat(const, rule.block)
        contrib = cw[:, cols].reshape(cw.shape[0], len(cols), -1).sum(axis=2) @ vals
        ws.biases[name] = (ws.biases[name] + contrib).astype(ws.biases[name].dtype)


# ---------------------------------------------------------------------------
# whole-layer removal and baseline

def drop_tail_layers(spec: NetworkSpec, ws: WeightSet, after_layer: str,
                     replacement_head: LayerSpec | None = None, seed: int = 0) -> tuple[NetworkSpec, WeightSet]:
    """Delete every trunk layer after ``after_layer`` and whatever depends on them.

    Heads that read a surviving layer stay. ``replacement_head`` (freshly
    initialised) may be attached to a surviving layer.
    """
    if after_layer not in spec:
        raise KeyError(f"unknown layer {after_layer!r}")
    pos = spec.index(after_layer)
    dropped = {l.name for l in spec.layers[pos + 1:] if l.kind != "head"}
    keep = []
    for l in spec.layers:
        if l.name in dropped or l.input in dropped:
            dropped.add(l.name)
        else:
            keep.append(l)
    if replacement_head is not None:
        if replacement_head.kind != "head":
            raise SpecError("replacement layer must be a head")
        keep.append(replacement_head)
    if not any(l.kind == "head" for l in keep):
        raise SpecError(f"dropping layers after {after_layer!r} leaves no head")
    new_spec = NetworkSpec(tuple(keep), spec.input_shape)
    out = ws.copy()
    for name in list(out.weights):
        if name not in new_spec:
            del out.weights[name], out.biases[name]
    if replacement_head is not None:
        fresh = init_weights(new_spec, seed)
        out.weights[replacement_head.name] = fresh.weights[replacement_head.name]
        out.biases[replacement_head.name] = fresh.biases[replacement_head.name]
    out.check(new_spec)
    return new_spec, out


def random_prune(spec: NetworkSpec, ws: WeightSet, fraction: float, layers: Sequence[str],
                 seed: int, counts: dict[str, int] | None = None
                 ) -> tuple[NetworkSpec, WeightSet, list[PruneDecision]]:
    """Remove ``floor(fraction * c_l)`` uniformly chosen filters from each layer.

    ``counts`` overrides the per-layer number of filters removed.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0,1), got {fraction}")
    rng = np.random.default_rng(seed)
    decisions = []
    for layer in layers:
        c = spec[layer].out_channels
        n = int(np.floor(fraction * c)) if counts is None else int(counts.get(layer, 0))
        idx = sorted(rng.choice(c, size=n, replace=False).tolist()) if n else []
        decisions.append(PruneDecision(layer, idx, ["random_baseline"] * n, [float("nan")] * n, [None] * n))
    new_spec, out = prune_filters(spec, ws, decisions)
    return new_spec, out, decisions


def grid_search_thresholds(score: Callable[[SelectionThresholds], float],
                           grid: Sequence[float] = tuple(np.round(np.arange(0.70, 1.0, 0.05), 2)) + (0.99,),
                           ) -> tuple[SelectionThresholds, float]:
    """Best valid (s_f, s_f_prime, s_g) triple from ``grid`` under ``score`` (higher wins)."""
    best, best_score = None, -np.inf
    for s_f, s_fp, s_g in itertools.product(grid, repeat=3):
        if s_f <= s_fp:
            continue
        t = SelectionThresholds(float(s_f), float(s_fp), float(s_g))
        v = score(t)
        if v > best_score:
            best, best_score = t, v
    if best is None:
        raise ValueError("grid admits no triple with s_f > s_f_prime")
    return best, best_score


# ---------------------------------------------------------------------------
# decisions file

DECISION_FIELDS = ("layer", "index", "reason", "splevel_f", "splevel_g")


def write_decisions(path, decisions: Iterable[PruneDecision]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECISION_FIELDS)
        for d in decisions:
            for k, i in enumerate(d.indices):
                reason = d.reasons[k] if d.reasons else ""
                f = d.splevel_f[k] if d.splevel_f else ""
                g = d.splevel_g[k] if d.splevel_g else None
                w.writerow([d.layer, i, reason, "" if f == "" else repr(float(f)), "" if g is None else repr(float(g))])


def read_decisions(path) -> list[PruneDecision]:
    by_layer: dict[str, PruneDecision] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = by_layer.setdefault(row["layer"], PruneDecision(row["layer"], []))
            d.indices.append(int(row["index"]))
            d.reasons.append(row["reason"])
            d.splevel_f.append(float(row["splevel_f"]) if row["splevel_f"] else float("nan"))
            d.splevel_g.append(float(row["splevel_g"]) if row["splevel_g"] else None)
    return [PruneDecision(d.layer, d.indices, d.reasons, d.splevel_f, d.splevel_g) for d in by_layer.values()]
