"""CSV report emitters for run logs.

Headers (exact):

* ``nonzeros.csv``: ``phase,layer,before,after``
* ``hist_<layer>.csv``: ``phase,bin_left,bin_right,pre_l1,post_l1``
* ``summary.csv``: ``layer,kind,filters_original,filters_pruned,params_original,
  params_pruned,flops_original,flops_pruned,size_mb_original,size_mb_pruned,
  val_acc_original,val_acc_pruned`` (size and accuracy filled on the ``total`` row only)
* ``threshold_phase<k>.csv``: ``t,nonzero_count,val_metric``
* ``layerwise.csv``: ``phase,mode,metric_th,filters_removed,params_after``
* ``baseline_comparison.csv``: ``method,seed,params,val_acc``
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .network import NetworkSpec, count_flops, count_params

NONZERO_HEADER = ("phase", "layer", "before", "after")
HIST_HEADER = ("phase", "bin_left", "bin_right", "pre_l1", "post_l1")
SUMMARY_HEADER = ("layer", "kind", "filters_original", "filters_pruned", "params_original", "params_pruned",
                  "flops_original", "flops_pruned", "size_mb_original", "size_mb_pruned",
                  "val_acc_original", "val_acc_pruned")
THRESHOLD_HEADER = ("t", "nonzero_count", "val_metric")
LAYERWISE_HEADER = ("phase", "mode", "metric_th", "filters_removed", "params_after")
COMPARISON_HEADER = ("method", "seed", "params", "val_acc")


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_table(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_threshold_csv(path, rows) -> Path:
    return _write(Path(path), THRESHOLD_HEADER, ((float(t), int(nz), float(m)) for t, nz, m in rows))


def write_comparison_csv(path, rows) -> Path:
    return _write(Path(path), COMPARISON_HEADER, rows)


def summary_rows(runlog) -> list[tuple]:
    before = NetworkSpec.from_text(runlog.spec_before)
    after = NetworkSpec.from_text(runlog.spec_after or runlog.spec_before)
    p0, p1 = count_params(before).per_layer, count_params(after).per_layer
    f0, f1 = count_flops(before).per_layer, count_flops(after).per_layer
    rows = []
    for name in before.weighted_layers:
        alive = name in after
        rows.append((name, before[name].kind, before[name].out_channels,
                     after[name].out_channels if alive else 0,
                     p0[name], p1.get(name, 0), f0[name], f1.get(name, 0), "", "", "", ""))
    rows.append(("total", "", sum(r[2] for r in rows), sum(r[3] for r in rows),
                 runlog.params_before, runlog.params_after, runlog.flops_before, runlog.flops_after,
                 runlog.size_before / 1e6, runlog.size_after / 1e6,
                 float(runlog.metric_before), float(runlog.metric_after)))
    return rows


def emit_reports(runlog, outdir, extras: bool = True) -> list[Path]:
    """Write nonzeros.csv, hist_<layer>.csv and summary.csv for ``runlog``.

    With ``extras`` the per-phase threshold sweeps and the set-wise vs
    layer-wise comparison (when present) are written too.
    """
    if not runlog.phases:
        raise ValueError("run log has no phases to report")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = [_write(out / "nonzeros.csv", NONZERO_HEADER,
                    ((p.index, layer, p.nonzero_before[layer], p.nonzero_after[layer])
                     for p in runlog.phases for layer in p.layers))]
    hist_rows: dict[str, list] = {}
    for p in runlog.phases:
        for layer, h in p.histograms.items():
            e = h["edges"]
            hist_rows.setdefault(layer, []).extend(
                (p.index, float(e[i]), float(e[i + 1]), h["pre"][i], h["post"][i]) for i in range(len(h["pre"])))
    for layer, rows in hist_rows.items():
        files.append(_write(out / f"hist_{layer}.csv", HIST_HEADER, rows))
    files.append(_write(out / "summary.csv", SUMMARY_HEADER, summary_rows(runlog)))
    if not extras:
        return files
    for p in runlog.phases:
        files.append(write_threshold_csv(out / f"threshold_phase{p.index}.csv", p.threshold_rows))
    lw = [(p.index, mode, float(p.layerwise[mode]["metric_th"]), p.layerwise[mode]["filters_removed"],
           p.layerwise[mode]["params_after"])
          for p in runlog.phases if p.layerwise for mode in ("setwise", "layerwise")]
    if lw:
        files.append(_write(out / "layerwise.csv", LAYERWISE_HEADER, lw))
    return files


def save_runlog(path, runlog) -> None:
    Path(path).write_text(json.dumps(runlog.to_dict(), indent=1))


def load_runlog(path):
    from .pipeline import RunLog
    return RunLog.from_dict(json.loads(Path(path).read_text()))


LAYER_TABLE_HEADER = ("layer", "kind", "filters_original", "filters_pruned", "params_original",
                      "params_pruned", "flops_original", "flops_pruned")


def layer_table(spec: NetworkSpec, reference: NetworkSpec | None = None) -> list[tuple]:
    """Per-layer filter/param/FLOP rows of ``spec`` against ``reference`` (itself if absent)."""
    ref = reference or spec
    p0, p1 = count_params(ref).per_layer, count_params(spec).per_layer
    f0, f1 = count_flops(ref).per_layer, count_flops(spec).per_layer
    rows = []
    for name in ref.weighted_layers:
        alive = name in spec
        rows.append((name, ref[name].kind, ref[name].out_channels, spec[name].out_channels if alive else 0,
                     p0[name], p1.get(name, 0), f0[name], f1.get(name, 0)))
    rows.append(("total", "", sum(r[2] for r in rows), sum(r[3] for r in rows),
                 sum(p0.values()), sum(p1.values()), sum(f0.values()), sum(f1.values())))
    return rows


def format_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
                     for r in cells)
