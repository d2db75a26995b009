import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metawrapper import model as mdl
from metawrapper.bilevel import TrainConfig
from metawrapper.evaluation import (
    ScoredSet, TimingStats, UndefinedMetricError, auc, bench, bench_ratio, impr,
    overfit_report, time_steps,
)
from metawrapper.oracle import brute_auc


def test_auc_examples():
    assert auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75
    assert auc(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert auc(np.full(6, 0.3), [1, 0, 1, 0, 0, 1]) == 0.5


def test_auc_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [0, 0])


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.random(n) if trial % 2 else rng.integers(0, 5, n) / 4.0
        worst = max(worst, abs(auc(scores, labels) - brute_auc(scores, labels)))
    assert worst < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_invariant_under_increasing_transform(pairs):
    scores = np.array([p[0] for p in pairs]) / 100.0
    labels = np.array([p[1] for p in pairs])
    if labels.min() == labels.max():
        return
    a = auc(scores, labels)
    assert auc(np.exp(scores) * 3 + 1, labels) == pytest.approx(a, abs=1e-12)
    assert 0.0 <= a <= 1.0


def test_impr_anchors():
    assert round(impr(0.8201, 0.7524), 2) == 26.82
    assert round(impr(0.9010, 0.8298), 2) == 21.59
    assert impr(0.71, 0.71) == 0.0
    with pytest.raises(ValueError):
        impr(0.8, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.51, 0.99), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_impr_monotone(base, a, b):
    lo, hi = sorted((a, b))
    assert impr(lo, base) <= impr(hi, base)


def test_overfit_report_constant_predictor(small_synthetic):
    cfg = mdl.ModelConfig(small_synthetic.n_items, small_synthetic.n_categories, embed_dim=4,
                          hidden=(4,), selector_hidden=(4,))
    params = mdl.init_params(cfg)
    params.theta["pred_wout"][:] = 0.0
    loss = lambda data: mdl.mean_loss(params, mdl.collate(data), cfg)
    rep = overfit_report(loss, small_synthetic.train, small_synthetic.test)
    assert rep.train_loss == pytest.approx(math.log(2), abs=1e-12)
    assert rep.test_loss == pytest.approx(math.log(2), abs=1e-12)
    assert abs(rep.gap) < 1e-12


def test_overfit_report_memorizer():
    rep = overfit_report(lambda d: 0.0 if d == "train" else 1.3, "train", "test")
    assert rep.gap == rep.test_loss == 1.3


def test_time_steps_counts():
    calls = []
    stats = time_steps(calls.append, n_steps=5, warmup=2)
    assert calls == list(range(7)) and stats.n == 5
    assert stats.p50_ms <= stats.p95_ms
    with pytest.raises(ValueError):
        time_steps(calls.append, n_steps=0)


def test_timing_stats():
    s = TimingStats.from_seconds([0.001, 0.002, 0.003])
    assert s.mean_ms == pytest.approx(2.0) and s.to_dict()["n"] == 3


def test_bench_and_ratio_smoke(small_synthetic):
    cfg = mdl.ModelConfig(small_synthetic.n_items, small_synthetic.n_categories, embed_dim=4,
                          hidden=(4,), selector_hidden=(4,))
    tc = TrainConfig(batch_size=16)
    s = bench(cfg, small_synthetic, "train", "meta_wrapper", tc, n_steps=5, warmup=1)
    assert s.n == 5 and s.mean_ms > 0
    r = bench_ratio(cfg, small_synthetic, "infer", "attention_only", "meta_wrapper", tc, n_steps=5,
                    warmup=1)
    assert set(r) == {"attention_only", "meta_wrapper", "ratio", "ratio_cpu", "ratio_wall", "clock"}
    assert r["ratio"] == r["ratio_cpu"] > 0 and r["ratio_wall"] > 0
    assert r["meta_wrapper"]["cpu_mean_ms"] > 0
    with pytest.raises(ValueError):
        bench_ratio(cfg, small_synthetic, "infer", "attention_only", "meta_wrapper", tc, n_steps=1,
                    warmup=0, clock="sundial")
    with pytest.raises(ValueError):
        bench(cfg, small_synthetic, "fly", "meta_wrapper", tc, n_steps=1, warmup=0)
