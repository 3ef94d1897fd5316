import math
from dataclasses import replace

import numpy as np
import pytest

from mlpk.baseline import match_counts, params_after_removal, rrf_layers, run_rrf
from mlpk.experiment import finetune_epochs
from mlpk.network import count_params, desk_spec, init_weights
from mlpk.pipeline import Phase, PhasePlan, RunLog, histogram, run_phase, run_plan, train_baseline
from mlpk.plan import PlanError, builtin_plans, load_plan, parse_plan
from mlpk.train import DivergenceError, TrainConfig, train

from oracles import tiny_spec

FAST = TrainConfig(epochs=1, lr=0.01, momentum=0.9, decay_every=0)


@pytest.fixture(scope="module")
def trained(small_data):
    spec = tiny_spec()
    ws, metrics = train_baseline(spec, small_data, 4, 0, FAST)
    return spec, ws, metrics


# -- training -----------------------------------------------------------------

def test_zero_epochs_returns_initialisation(small_data):
    spec = tiny_spec()
    ws = init_weights(spec, 0)
    out, hist = train(spec, ws, small_data.train, replace(FAST, epochs=0))
    assert out.equal(ws) and hist == []


def test_training_is_bitwise_reproducible(small_data):
    spec = tiny_spec()
    a, ha = train(spec, init_weights(spec, 1), small_data.train, replace(FAST, epochs=2))
    b, hb = train(spec, init_weights(spec, 1), small_data.train, replace(FAST, epochs=2))
    assert a.equal(b) and ha == hb


def test_divergence_raises(small_data):
    spec = tiny_spec()
    with pytest.raises(DivergenceError) as e:
        train(spec, init_weights(spec, 0), small_data.train, replace(FAST, lr=1e6, epochs=5))
    assert not math.isfinite(e.value.loss)


def test_baseline_learns_small_task(trained):
    assert trained[2]["val_acc"] > 60


def test_lr_step_decay_changes_result(small_data):
    spec = tiny_spec()
    a, _ = train(spec, init_weights(spec, 0), small_data.train, replace(FAST, epochs=3, decay_every=0))
    b, _ = train(spec, init_weights(spec, 0), small_data.train, replace(FAST, epochs=3, decay_every=1))
    assert not a.equal(b)


# -- phases -------------------------------------------------------------------

def test_run_phase_record(trained, small_data, tmp_path):
    spec, ws, _ = trained
    phase = Phase(["c1", "c2", "c3"], alpha=0.02, l1_epochs=1, compare_layerwise=True)
    new_spec, new_ws, rec = run_phase(spec, ws, small_data, phase, 0, 42, FAST, FAST, outdir=tmp_path)
    new_ws.check(new_spec)
    assert rec.params_after == count_params(new_spec).total <= rec.params_before
    assert len(rec.threshold_rows) == 40
    ok = [t for t, _, m in rec.threshold_rows if m >= rec.metric_l1 - phase.eps2]
    assert rec.threshold == (max(ok) if ok else 0.0)
    for n in phase.layers:
        assert rec.nonzero_after[n] <= rec.nonzero_l1[n]
        h = rec.histograms[n]
        assert sum(h["pre"]) == sum(h["post"]) == ws.weights[n].size
    assert set(rec.layerwise) == {"layerwise_thresholds", "setwise", "layerwise"}
    assert (tmp_path / "decisions_phase0.csv").exists() and (tmp_path / "threshold_phase0.csv").exists()
    for row in rec.decisions:
        assert row["layer"] in phase.layers


def test_run_phase_is_deterministic(trained, small_data):
    spec, ws, _ = trained
    phase = Phase(["c2", "c3", "f1"], alpha=0.02, l1_epochs=1)
    a = run_phase(spec, ws, small_data, phase, 1, 42, FAST, FAST)
    b = run_phase(spec, ws, small_data, phase, 1, 42, FAST, FAST)
    assert a[0] == b[0] and a[1].equal(b[1])
    assert a[2].metric_after == b[2].metric_after


def test_forced_threshold_skips_search(trained, small_data):
    spec, ws, _ = trained
    phase = Phase(["c1", "c2"], alpha=0.01, threshold=1e9, l1_epochs=1)
    new_spec, _, rec = run_phase(spec, ws, small_data, phase, 0, 42, FAST, FAST)
    assert rec.threshold_rows == [] and rec.threshold == 1e9
    # everything zeroed: each layer keeps exactly one filter
    assert new_spec["c1"].out_channels == 1 and new_spec["c2"].out_channels == 1


def test_boundary_layer_pruned_only_once(trained, small_data):
    spec, ws, _ = trained
    plan = PhasePlan([Phase(["c1", "c2"], alpha=0.05, threshold=1e9, l1_epochs=1),
                      Phase(["c2", "c3"], alpha=0.05, threshold=1e9, l1_epochs=1)], 42, FAST, FAST)
    _, _, log = run_plan(spec, ws, small_data, plan)
    second = [d["layer"] for d in log.phases[1].decisions]
    assert "c2" not in second and "c3" in second


def test_empty_plan_is_identity(trained, small_data):
    spec, ws, _ = trained
    new_spec, new_ws, log = run_plan(spec, ws, small_data, PhasePlan([]))
    assert new_spec == spec and new_ws.equal(ws) and log.compression == 1.0


def test_runlog_dict_round_trip(trained, small_data):
    spec, ws, _ = trained
    plan = PhasePlan([Phase(["c1"], alpha=0.01, threshold=0.0, l1_epochs=1)], 42, FAST, FAST)
    _, _, log = run_plan(spec, ws, small_data, plan)
    assert RunLog.from_dict(log.to_dict()) == log


def test_histogram_shared_edges():
    h = histogram(np.array([-1.0, 0.0, 1.0]), np.array([0.0, 0.0, 2.0]), bins=4)
    assert h["edges"][0] == -1.0 and h["edges"][-1] == 2.0
    assert sum(h["pre"]) == sum(h["post"]) == 3


# -- plan files ----------------------------------------------------------------

def test_parse_plan_fields():
    plan = parse_plan("""
        seed = 7
        [train]
        lr = 0.01
        [retrain]
        lr = 0.002
        [[phase]]
        layers = ["c1", "c2"]
        alpha = 0.1
        s_f = 0.95
        l1_epochs = 2
        retrain_epochs = 3
        [[phase]]
        layers = ["c2", "c3"]
        alpha_grid = [0.001, 0.01]
        progressive = false
    """)
    assert plan.seed == 7 and plan.train.lr == 0.01 and plan.retrain.lr == 0.002
    p0, p1 = plan.phases
    assert p0.alpha == 0.1 and p0.selection.s_f == 0.95 and p0.selection.s_g == 0.95
    assert p0.retrain_epochs == 3 and p1.alpha is None and p1.alpha_grid == (0.001, 0.01)
    assert p1.progressive is False


@pytest.mark.parametrize("text,match", [
    ("bogus = 1", "top-level"),
    ("[train]\nepochz = 3", "train"),
    ("[[phase]]\nalpha = 0.1", "layers"),
    ("[[phase]]\nlayers = ['c1']\nwat = 1", "unknown"),
    ("[[phase]]\nlayers = ['c1']\ns_f = 0.5", "s_f"),
    ("[[phase]\n", "TOML"),
])
def test_plan_errors(text, match):
    with pytest.raises(PlanError, match=match):
        parse_plan(text)


def test_empty_plan_text():
    assert parse_plan("").phases == []


def test_builtin_desk_plan():
    assert "desk" in builtin_plans()
    plan = load_plan("desk")
    spec = desk_spec()
    assert [len(p.layers) for p in plan.phases] == [8, 2]
    assert all(spec[n].kind == "conv" for n in plan.phases[0].layers)
    assert finetune_epochs(plan) == 2 * 4 + 2 * 8


# -- RRF baseline ------------------------------------------------------------------

@pytest.mark.parametrize("target", [14902, 30000, 60000])
def test_match_counts_within_tolerance(target):
    spec = desk_spec()
    _, counts, params = match_counts(spec, target)
    assert abs(params - target) <= 0.05 * target
    assert params == params_after_removal(spec, counts)


def test_match_counts_never_empties_layers():
    spec = desk_spec()
    _, counts, _ = match_counts(spec, 1000)
    assert all(counts[n] < spec[n].out_channels for n in counts)


def test_run_rrf_counts_match_closed_form(trained, small_data):
    spec, ws, _ = trained
    _, counts, params = match_counts(spec, count_params(spec).total // 2)
    pspec, pws, res = run_rrf(spec, ws, small_data, 0.0, 3, 1, FAST, counts=counts)
    assert res.params == params == count_params(pspec).total
    assert rrf_layers(spec) == ["c1", "c2", "c3", "f1", "f2"]
