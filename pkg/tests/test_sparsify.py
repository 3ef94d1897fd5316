import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlpk import sparsify as sp
from mlpk.network import count_nonzero, init_weights
from mlpk.train import TrainConfig

from oracles import tiny_spec

CONVS = ["c1", "c2", "c3"]


def _ws(seed=0):
    return init_weights(tiny_spec(), seed)


@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_threshold_idempotent(seed, t):
    ws = _ws(seed)
    once = sp.apply_threshold(ws, CONVS, t)
    twice = sp.apply_threshold(once, CONVS, t)
    assert once.equal(twice)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_nonzero_count_monotone_over_sweep(seed):
    ws = _ws(seed)
    sigma = sp.pooled_std(ws, CONVS)
    counts = [sum(count_nonzero(sp.apply_threshold(ws, CONVS, t), CONVS).values())
              for t in sp.threshold_grid(sigma)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_threshold_touches_only_layer_weights():
    ws = _ws()
    for b in ws.biases.values():
        b[:] = 1e-4
    th = sp.apply_threshold(ws, ["c2"], 10.0)
    assert not th.weights["c2"].any()
    assert np.array_equal(th.weights["c1"], ws.weights["c1"])
    assert all(np.array_equal(th.biases[k], ws.biases[k]) for k in ws.biases)
    assert th.tag == "theta_L1_th" and th.threshold == 10.0


def test_threshold_is_strict():
    ws = _ws()
    ws.weights["c1"][0, 0, 0, :] = [0.5, -0.5, 0.49]
    th = sp.apply_threshold(ws, ["c1"], 0.5)
    np.testing.assert_array_equal(th.weights["c1"][0, 0, 0], [0.5, -0.5, 0.0])


def test_negative_threshold_rejected():
    with pytest.raises(ValueError):
        sp.apply_threshold(_ws(), CONVS, -0.1)


def test_threshold_grid():
    grid = sp.threshold_grid(2.0)
    assert len(grid) == 40
    assert grid[0] == pytest.approx(0.1) and grid[-1] == pytest.approx(4.0)


def test_pooled_std_uses_all_layers_jointly():
    ws = _ws()
    flat = np.concatenate([ws.weights[n].ravel() for n in CONVS])
    assert sp.pooled_std(ws, CONVS) == pytest.approx(float(flat.std()), rel=1e-6)


def _nonzero_metric(layers):
    # a metric that decays as weights are removed, so the eps2 cut is predictable
    def metric(spec, ws):
        return float(sum(np.count_nonzero(ws.weights[n]) for n in layers))
    return metric


def test_search_threshold_picks_largest_within_eps():
    ws = _ws()
    metric = _nonzero_metric(CONVS)
    ref = metric(None, ws)
    res = sp.search_threshold(tiny_spec(), ws, CONVS, eps2=0.3 * ref, metric=metric)
    ok = [t for t, _, m in res.rows if m >= ref - 0.3 * ref]
    assert res.threshold == max(ok) and not res.warning
    assert [r[1] for r in res.rows] == [r[2] for r in res.rows]  # metric == nonzero count here


def test_search_threshold_warns_when_nothing_fits():
    ws = _ws()
    # any thresholding at all costs one point; eps2 = 0 tolerates none
    metric = lambda s, w: 0.0 if w.threshold is None else -1.0
    res = sp.search_threshold(tiny_spec(), ws, CONVS, eps2=0.0, metric=metric)
    assert res.threshold == 0.0 and res.warning


def test_layerwise_thresholds_differ_per_layer():
    ws = _ws()
    ws.weights["c3"] *= 10
    metric = _nonzero_metric(CONVS)
    ref = metric(None, ws)
    per = sp.layerwise_thresholds(tiny_spec(), ws, CONVS, 0.1 * ref, metric)
    assert set(per) == set(CONVS) and per["c3"] > per["c1"]
    applied = sp.apply_layerwise(ws, per)
    for n, t in per.items():
        assert not (np.abs(applied.weights[n]) < t)[applied.weights[n] != 0].any()


def test_check_layer_set():
    spec = tiny_spec()
    sp.check_layer_set(spec, ["c2", "c3", "f1"])
    with pytest.raises(ValueError, match="contiguous"):
        sp.check_layer_set(spec, ["c1", "c3"])
    with pytest.raises(ValueError, match="prunable"):
        sp.check_layer_set(spec, ["c3", "ha"])
    with pytest.raises(ValueError, match="empty"):
        sp.check_layer_set(spec, [])


def test_config_validation():
    with pytest.raises(ValueError):
        sp.SparsityConfig(["c1"], alpha=-1.0)
    with pytest.raises(ValueError):
        sp.SparsityConfig(["c1"], eps2=-1.0)


def test_select_alpha_largest_passing(monkeypatch):
    ws = _ws()
    quality = {1e-3: 99.0, 1e-2: 98.0, 1e-1: 90.0}

    def fake_train(spec, w, data, cfg):
        return w.replace(threshold=cfg.alpha)  # carry alpha through to the metric

    monkeypatch.setattr(sp, "train_l1", fake_train)
    metric = lambda s, w: 100.0 if w.threshold is None else quality[w.threshold]
    cfg = sp.SparsityConfig(CONVS)
    res = sp.select_alpha(tiny_spec(), ws, None, 2.5, sorted(quality), cfg, metric)
    assert res.alpha == 1e-2 and not res.warning
    assert [a for a, _ in res.history] == sorted(quality)


def test_select_alpha_falls_back_to_smallest(monkeypatch):
    monkeypatch.setattr(sp, "train_l1", lambda spec, w, data, cfg: w.replace(threshold=cfg.alpha))
    metric = lambda s, w: 100.0 if w.threshold is None else 0.0
    res = sp.select_alpha(tiny_spec(), _ws(), None, 2.5, [0.1, 0.2], sp.SparsityConfig(CONVS), metric)
    assert res.alpha == 0.1 and res.warning


def test_select_alpha_grid_checks():
    cfg = sp.SparsityConfig(CONVS)
    with pytest.raises(ValueError):
        sp.select_alpha(tiny_spec(), _ws(), None, 2.5, [], cfg, None)
    with pytest.raises(ValueError):
        sp.select_alpha(tiny_spec(), _ws(), None, 2.5, [0.2, 0.1], cfg, None)


def test_l1_training_drives_weights_toward_zero(small_data):
    spec = tiny_spec()
    ws = init_weights(spec, 0)
    tc = TrainConfig(epochs=3, lr=0.01, momentum=0.9, decay_every=0)
    plain = sp.train_l1(spec, ws, small_data.train, sp.SparsityConfig(CONVS, 0.0, train=tc))
    l1 = sp.train_l1(spec, ws, small_data.train, sp.SparsityConfig(CONVS, 0.05, train=tc))
    assert l1.tag == "theta_L1" and l1.layer_set == tuple(CONVS)
    assert sp.median_abs(l1, CONVS) < sp.median_abs(plain, CONVS)
    assert sp.near_zero_fraction(l1, CONVS) > sp.near_zero_fraction(plain, CONVS)
    # layers outside the set carry no penalty
    assert sp.median_abs(l1, ["f1"]) == pytest.approx(sp.median_abs(plain, ["f1"]), rel=0.2)
