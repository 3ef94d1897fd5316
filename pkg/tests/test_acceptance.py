"""Acceptance criteria 1-9. Each test prints one ``criterion N PASS|FAIL`` line.

Criteria 5-9 share one desk-scale experiment run (several minutes on one
core); set ``MLPK_ACCEPT_OUT`` to keep its output directory.
"""
import json
import time
import zlib

import numpy as np
import pytest

from mlpk import cli
from mlpk import sparsify as sp
from mlpk.checkpoint import CheckpointError, dumps, load_checkpoint, loads
from mlpk.prune import SelectionThresholds, select_filters, sparsity_level
from mlpk.reports import (COMPARISON_HEADER, HIST_HEADER, NONZERO_HEADER, SUMMARY_HEADER, load_runlog, read_table,
                          summary_rows)

from oracles import (ACCOUNTING_TARGETS, FD_TOL, N_INSTANCES, accounting_value, brute_sparsity,
                     decisions_as_tuples, fc_neuron_trial, random_masked_slice, random_thresholded,
                     reference_selection, run_gradchecks, tiny_spec, zero_filter_trial, zero_g_trial)

pytestmark = pytest.mark.slow


def test_criterion_1_accounting(report_criterion):
    t0 = time.perf_counter()
    misses = []
    for label, conv, fc, quantity, target, tol in ACCOUNTING_TARGETS:
        value = accounting_value(conv, fc, quantity)
        if abs(value - target) > tol * target:
            misses.append(f"{label}={value:.4g} (target {target:.4g} +-{tol:.0%})")
    dt = time.perf_counter() - t0
    ok = not misses and dt < 1.0
    detail = f"{len(ACCOUNTING_TARGETS)} targets within tolerance in {dt:.3f}s" if ok else \
        f"misses={misses} time={dt:.3f}s"
    assert report_criterion(1, ok, detail)


def test_criterion_2_gradients(report_criterion):
    t0 = time.perf_counter()
    worst = run_gradchecks(seed=2024, n=N_INSTANCES)
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < FD_TOL and dt < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    assert report_criterion(2, ok, f"worst relative error per op over {N_INSTANCES} instances: {detail}; "
                                   f"{dt:.1f}s")


def test_criterion_3_equivalence(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    spec = tiny_spec()
    fz = max(zero_filter_trial(spec, rng) for _ in range(50))
    zg = max(zero_g_trial(spec, rng) for _ in range(50))
    fcn = max(fc_neuron_trial(tiny_spec(fc=(8, 6)), rng) for _ in range(50))
    dt = time.perf_counter() - t0
    ok = fz <= 1e-5 and zg <= 1e-5 and fcn <= 1e-6 and dt < 120
    assert report_criterion(3, ok, f"max |diff| over 50 batches: zero-filter={fz:.1e} zero-G={zg:.1e} "
                                   f"fc-neuron={fcn:.1e}; {dt:.1f}s")


def test_criterion_4_sparsity_and_selection(report_criterion):
    rng = np.random.default_rng(4)
    slice_mismatch = 0
    for _ in range(1000):
        block = random_masked_slice(rng)
        slice_mismatch += sparsity_level(block) != brute_sparsity(block)
    spec = tiny_spec(c=(6, 7, 5))
    layers = ["c1", "c2", "c3"]
    sel_mismatch = 0
    for _ in range(100):
        ws = random_thresholded(spec, rng)
        thr = SelectionThresholds()
        got = decisions_as_tuples(select_filters(spec, ws, layers, thr))
        sel_mismatch += got != reference_selection(spec, ws, layers, thr, True)
    ok = slice_mismatch == 0 and sel_mismatch == 0
    assert report_criterion(4, ok, f"sparsity_level mismatches {slice_mismatch}/1000, "
                                   f"selection mismatches {sel_mismatch}/100")


# -- criteria on the desk-scale experiment ---------------------------------------------

@pytest.fixture(scope="module")
def run(desk_experiment):
    out, results = desk_experiment
    return out, results, load_runlog(out / "run" / "runlog.json")


def test_criterion_5_threshold_properties(run, report_criterion):
    out, _, log = run
    notes, ok = [], True
    for p in log.phases:
        rows = read_table(out / "run" / f"threshold_phase{p.index}.csv")
        counts = [int(r["nonzero_count"]) for r in rows]
        mono = len(counts) == 40 and all(a >= b for a, b in zip(counts, counts[1:]))
        ok &= mono
        notes.append(f"phase{p.index} sweep {len(counts)} points monotone={mono}")
    spec, ws = load_checkpoint(out / "run" / "phase0.ckpt")
    layers = log.phases[0].layers
    for t in (log.phases[0].threshold, 0.05, 0.5):
        once = sp.apply_threshold(ws, layers, t)
        ok &= once.equal(sp.apply_threshold(once, layers, t))
    notes.append("idempotent=%s" % ok)
    lw = read_table(out / "run" / "layerwise.csv")
    modes = {r["mode"]: r for r in lw}
    ok &= set(modes) == {"setwise", "layerwise"}
    if ok:
        notes.append("set-wise removed %s filters (%s params) vs layer-wise %s (%s params)" % (
            modes["setwise"]["filters_removed"], modes["setwise"]["params_after"],
            modes["layerwise"]["filters_removed"], modes["layerwise"]["params_after"]))
    assert report_criterion(5, ok, "; ".join(notes))


def test_criterion_6_end_to_end(run, report_criterion, capsys, tmp_path):
    out, res, _ = run
    base, after, red = res["baseline_val_acc"], res["val_acc_after"], res["reduction"]
    t0 = time.perf_counter()
    code = cli.main(["compress", "--plan", "desk", "--checkpoint", str(out / "base" / "model.ckpt"),
                     "--data", "synthetic", "--seed", "42", "--out", str(tmp_path)])
    rerun = capsys.readouterr().out.strip().splitlines()[-1]
    dt = time.perf_counter() - t0
    ok = (base >= 90.0 and red >= 0.60 and after >= base - 2.0 and res["wall_time"] <= 1800
          and code == 0 and rerun == res["final_line"])
    assert report_criterion(6, ok, f"baseline={base:.2f}% reduction={red:.1%} after={after:.2f}% "
                                   f"experiment={res['wall_time']:.0f}s rerun({dt:.0f}s) identical="
                                   f"{rerun == res['final_line']} [{res['final_line']}]")


def test_criterion_7_rrf_comparison(run, report_criterion):
    out, res, _ = run
    c = res["comparison"]
    rows = read_table(out / "run" / "baseline_comparison.csv")
    recorded = len(rows) == 2 * len(c["seeds"]) and tuple(rows[0]) == COMPARISON_HEADER
    ok = (len(c["seeds"]) == 3 and c["max_param_gap"] <= 0.05 and c["method_mean"] >= c["rrf_mean"]
          and recorded)
    assert report_criterion(7, ok, f"seeds={c['seeds']} method mean={c['method_mean']:.2f}% "
                                   f"rrf mean={c['rrf_mean']:.2f}% max param gap={c['max_param_gap']:.2%} "
                                   f"retrain epochs={c['finetune_epochs']} recorded={recorded}")


def test_criterion_8_shape_checks(run, report_criterion):
    out, _, log = run
    bad_nz, bad_zero, n = [], [], 0
    for p in log.phases:
        for layer in p.layers:
            n += 1
            if not p.nonzero_after[layer] <= min(p.nonzero_l1[layer], p.nonzero_before[layer]):
                bad_nz.append(f"{p.index}/{layer}")
            h = p.histograms[layer]
            e = h["edges"]
            (z,) = [i for i in range(len(h["pre"])) if e[i] <= 0.0 < e[i + 1]]
            if not h["post"][z] > h["pre"][z]:
                bad_zero.append(f"{p.index}/{layer}")
    # the emitted CSVs carry the same shape
    for r in read_table(out / "run" / "nonzeros.csv"):
        if int(r["after"]) > int(r["before"]):
            bad_nz.append("csv:" + r["layer"])
    ok = not bad_nz and not bad_zero
    assert report_criterion(8, ok, f"{n} layer records; nonzero after>before: {bad_nz or 'none'}; "
                                   f"zero bin not increased: {bad_zero or 'none'}")


def test_criterion_9_persistence(run, report_criterion):
    out, res, log = run
    notes, ok = [], True
    for name in ("base/model.ckpt", "run/phase0.ckpt", "run/phase1.ckpt", "run/final.ckpt"):
        raw = (out / name).read_bytes()
        spec, ws = loads(raw)
        ok &= dumps(spec, ws) == raw
    notes.append("4 checkpoints re-serialise bitwise")
    raw = bytearray((out / "run" / "final.ckpt").read_bytes())
    detected = 0
    for off in np.random.default_rng(9).integers(0, len(raw) - 4, size=20):
        bad = bytearray(raw)
        bad[off] ^= 0x10
        try:
            loads(bytes(bad))
        except CheckpointError:
            detected += 1
    ok &= detected == 20
    notes.append(f"corruption detected {detected}/20")

    lossless = True
    d = out / "run"
    lossless &= tuple(read_table(d / "nonzeros.csv")[0]) == NONZERO_HEADER
    got = [(int(r["phase"]), r["layer"], int(r["before"]), int(r["after"])) for r in read_table(d / "nonzeros.csv")]
    lossless &= got == [(p.index, l, p.nonzero_before[l], p.nonzero_after[l]) for p in log.phases for l in p.layers]
    for p in log.phases:
        for layer, h in p.histograms.items():
            rows = [r for r in read_table(d / f"hist_{layer}.csv") if int(r["phase"]) == p.index]
            lossless &= tuple(rows[0]) == HIST_HEADER
            lossless &= [int(r["pre_l1"]) for r in rows] == list(h["pre"])
            lossless &= [float(r["bin_right"]) for r in rows] == [float(x) for x in h["edges"][1:]]
        th = [(float(r["t"]), int(r["nonzero_count"]), float(r["val_metric"]))
              for r in read_table(d / f"threshold_phase{p.index}.csv")]
        lossless &= th == [(float(t), int(c), float(m)) for t, c, m in p.threshold_rows]
    summary = read_table(d / "summary.csv")
    lossless &= tuple(summary[0]) == SUMMARY_HEADER
    fmt = lambda v: repr(float(v)) if isinstance(v, float) else str(v)
    lossless &= [tuple(r.values()) for r in summary] == [tuple(map(fmt, row)) for row in summary_rows(log)]
    lossless &= json.loads((out / "results.json").read_text())["final_line"] == res["final_line"]
    ok &= lossless
    notes.append(f"reports parse back losslessly={lossless}")
    # a corrupted CRC field itself is caught too
    tail = bytearray(raw)
    tail[-4:] = (zlib.crc32(bytes(raw[:-4])) ^ 1).to_bytes(4, "little")
    try:
        loads(bytes(tail))
        ok = False
    except CheckpointError:
        pass
    assert report_criterion(9, ok, "; ".join(notes))
