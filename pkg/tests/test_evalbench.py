import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anchordepth.anchors import compute_targets
from anchordepth.errors import CapabilityError, EmptyMaskError
from anchordepth.evalbench import (
    BenchmarkReport, MethodSpec, abs_rel, aggregate_csv, combine_reports, delta1, depth_metrics,
    drop_anchor_sets, evaluate_method, records_csv, regime_anchors, run_benchmark, run_drop_anchor,
    weighted_aggregate,
)
from anchordepth.field import DepthMap
from anchordepth.generator import GeneratorConfig, init_params
from anchordepth.synth import ScenarioSpec, generate_scene


def _dm(a):
    return DepthMap.from_raw(np.asarray(a, dtype=float))


@pytest.fixture(scope="module")
def corpus():
    spec = ScenarioSpec("mixed", 0.05, 40, 48, seed=2, noise_corr=3.0)
    return [generate_scene(spec, f"scene_{i:04d}") for i in range(3)]


def test_abs_rel_examples():
    gt = _dm([[1.0, 2.0], [4.0, 5.0]])
    assert abs_rel(gt, gt) == 0.0
    assert abs_rel(_dm(1.1 * gt.values), gt) == pytest.approx(0.1)
    assert abs_rel(_dm([[1.1, 2.6]]), _dm([[1.0, 2.0]])) == pytest.approx(0.2)


def test_delta1_examples():
    gt = _dm([[1.0, 2.0], [4.0, 5.0]])
    assert delta1(gt, gt) == 1.0
    assert delta1(_dm(1.3 * gt.values), gt) == 0.0
    assert delta1(_dm([[1.1, 3.0]]), _dm([[1.0, 2.0]])) == 0.5


def test_invalid_predictions_excluded_and_counted():
    gt = _dm([[1.0, 2.0, 4.0, 8.0]])
    m = depth_metrics(_dm([[1.0, -1.0, 4.4, 8.0]]), gt)
    assert m.abs_rel == pytest.approx(0.1 / 3)
    assert m.invalid_fraction == pytest.approx(0.25)
    with pytest.raises(EmptyMaskError):
        abs_rel(_dm([[0.0]]), _dm([[1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2 ** 31))
def test_metrics_scale_consistent(c, seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 10, (5, 6))
    pred = gt * np.exp(rng.normal(0, 0.3, gt.shape))
    a, b = depth_metrics(_dm(pred), _dm(gt)), depth_metrics(_dm(c * pred), _dm(c * gt))
    assert a.abs_rel == pytest.approx(b.abs_rel, rel=1e-12)
    assert a.delta1 == b.delta1


def test_delta1_monotone_under_fixing(rng):
    gt = rng.uniform(1, 5, (6, 6))
    pred = gt * np.exp(rng.normal(0, 0.4, gt.shape))
    before = delta1(_dm(pred), _dm(gt))
    for idx in [(0, 0), (3, 2), (5, 5)]:
        pred[idx] = gt[idx]
        after = delta1(_dm(pred), _dm(gt))
        assert after >= before
        before = after


def test_weighted_aggregate_examples():
    assert weighted_aggregate([0.1, 0.3], [1, 1]) == pytest.approx(0.2)
    assert round(weighted_aggregate([0.05, 0.07], [754, 1034]), 4) == 0.0616
    assert weighted_aggregate([0.42], [7]) == 0.42
    with pytest.raises(ValueError):
        weighted_aggregate([0.1], [0])


def test_region_needs_labels(corpus):
    scene = generate_scene(ScenarioSpec("global", 0.0, 24, 24), "g")
    with pytest.raises(CapabilityError):
        evaluate_method(MethodSpec("region"), scene, regime_anchors(scene, "low", 0))
    with pytest.raises(CapabilityError):
        evaluate_method(MethodSpec("basis"), scene, regime_anchors(scene, "low", 0))
    with pytest.raises(ValueError, match="valid methods"):
        MethodSpec("magic")


def test_global_exact_on_global_scene():
    scene = generate_scene(ScenarioSpec("global", 0.0, 48, 64, seed=8), "g")
    rec = evaluate_method(MethodSpec("global"), scene, regime_anchors(scene, "low", 0))
    assert rec.abs_rel <= 1e-9


def test_single_channel_basis_is_geometric_mean_scaling(corpus):
    # K = 1 means E0 = G0 B0 = 1, so the ridge solve with lambda = 0 returns mean(y)
    gcfg = GeneratorConfig(k=1)
    params = init_params(gcfg, 0, basis_head_scale=0.0)
    scene = corpus[0]
    a = regime_anchors(scene, "low", 1)
    rec = evaluate_method(MethodSpec("basis", {"ridge": 0.0}, model=(params, gcfg)), scene, a)
    c = np.exp(np.mean(compute_targets(a, scene.depth_mde)))
    ref = abs_rel(DepthMap(scene.depth_mde.values * c, scene.depth_mde.mask), scene.depth_gt, scene.mask)
    assert rec.abs_rel == pytest.approx(ref, rel=1e-6)


def test_single_record_report(corpus):
    rep = run_benchmark(corpus[:1], [MethodSpec("global")], ["low"], seed=0)
    (r,) = rep.records
    row = [x for x in rep.aggregates() if x[2] == "abs_rel"][0]
    assert row == ("global", "low", "abs_rel", r.abs_rel, r.abs_rel, 1)


def test_paired_anchor_hashes(corpus):
    rep = run_benchmark(corpus, [MethodSpec("global"), MethodSpec("lwlr"), MethodSpec("region")],
                        ["low", "med"], seed=4)
    hashes = {}
    for r in rep.records:
        hashes.setdefault((r.scene_id, r.regime), set()).add(r.anchor_hash)
    assert all(len(h) == 1 for h in hashes.values())
    # mixed scenes built on grid_smooth have no labels: excluded with a count, not dropped silently
    n_labelled = sum(s.regions is not None for s in corpus)
    assert len(rep.failures) == 2 * (3 - n_labelled)
    assert len(rep.records) + len(rep.failures) == 3 * 2 * 3


def test_benchmark_deterministic_and_worker_independent(corpus):
    methods = [MethodSpec("global"), MethodSpec("grid")]
    a = run_benchmark(corpus, methods, ["low"], seed=1, workers=1)
    b = run_benchmark(corpus, methods, ["low"], seed=1, workers=4)
    assert records_csv(a) == records_csv(b)
    assert aggregate_csv(a, digits=None) == aggregate_csv(b, digits=None)


def test_drop_anchor_protocol(corpus):
    scene = corpus[1]
    sets = drop_anchor_sets(scene, 5)
    assert sorted(sets) == [1, 3, 5, 7, 9]
    for n in (1, 3, 5, 7):
        assert set(sets[n].anchors) <= set(sets[n + 2].anchors)
    rep = run_drop_anchor([scene], MethodSpec("global"), seed=5)
    nine = [r for r in rep.records if r.regime == "9"][0]
    assert nine.abs_rel == evaluate_method(MethodSpec("global"), scene, sets[9]).abs_rel
    assert [r.regime for r in sorted(rep.records, key=lambda r: r.n_anchors)] == ["1", "3", "5", "7", "9"]


def test_combine_reports_weights_by_count(corpus):
    r1 = run_benchmark(corpus[:1], [MethodSpec("global")], ["low"])
    r2 = run_benchmark(corpus[1:], [MethodSpec("global")], ["low"])
    both = run_benchmark(corpus, [MethodSpec("global")], ["low"])
    comb = {k[:3]: k[3] for k in combine_reports([r1, r2])}
    assert comb[("global", "low", "abs_rel")] == pytest.approx(both.metric("global", "low"), rel=1e-12)


def test_aggregate_csv_rounding():
    rep = BenchmarkReport([])
    assert aggregate_csv(rep) == "method,regime,metric,mean,median,weight\n"
