import numpy as np
import pytest

from anchordepth.anchors import Anchor, AnchorSet
from anchordepth.errors import EmptyMaskError, ShapeError
from anchordepth.field import DepthMap
from anchordepth.generator import (
    GeneratorConfig, GeneratorInput, LossConfig, build_input, evaluate, forward, init_params,
    loss_and_grad, loss_anchor, loss_decor, loss_dense, loss_gate, make_problem, param_count,
    param_shapes, zero_norm_channels,
)
from anchordepth.gradcheck import check_gradients, toy_gradcheck, toy_problem


def _depth(h=6, w=7, v=2.0):
    return DepthMap.from_raw(np.full((h, w), v))


def test_input_layout():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(3, 6, 7))
    x = build_input(f, _depth(), 3)
    assert x.channels.shape == (3 + 5, 6, 7)
    np.testing.assert_array_equal(x.channels[:3], f)
    assert np.all(x.channels[3] == np.log(2.0))
    assert not x.channels[4:6].any()  # constant depth has no gradient
    assert x.channels[6, 0, 0] == -1 and x.channels[6, -1, 0] == 1
    assert x.channels[7, 0, -1] == 1


def test_input_ablation_and_no_features():
    f = np.ones((2, 6, 7))
    x = build_input(f, _depth(), 2, ablate_features=True)
    assert x.channels.shape[0] == 7 and not x.channels[:2].any()
    x0 = build_input(None, _depth(), 0)
    assert x0.channels.shape[0] == 5
    with pytest.raises(ShapeError):
        build_input(f, _depth(), 3)


def test_input_single_pixel_coords():
    x = build_input(np.zeros((0, 1, 1)), _depth(1, 1))
    assert x.channels[3, 0, 0] == -1 and x.channels[4, 0, 0] == -1


def test_input_invalid_pixels_zero():
    raw = np.full((4, 4), 3.0)
    raw[1, 2] = 0.0
    x = build_input(np.ones((1, 4, 4)), DepthMap.from_raw(raw), 1)
    assert not x.channels[:, 1, 2].any() and not x.valid[1, 2]


def test_param_count_is_pure():
    cfg = GeneratorConfig(2, 4, 2, 4)
    expect = 4 * 8 * 9 + 4 + 4 * 4 * 9 + 4 + 3 * 4 + 3 + 4 * 4 + 4
    assert param_count(cfg) == expect
    assert sum(v.size for v in init_params(cfg, 3).values()) == expect


def test_zero_heads_uniform_gate_and_unit_basis():
    cfg = GeneratorConfig(2, 4, 2, 5)
    p = init_params(cfg, 0, basis_head_scale=0.0)
    x = build_input(np.random.default_rng(1).normal(size=(2, 6, 7)), _depth(), 2)
    out = forward(p, x)
    assert np.all(out.gating == 1 / 5)
    assert np.all(out.basis[0] == 1) and not out.basis[1:].any()
    np.testing.assert_array_equal(out.embedding[0], out.gating[0])
    assert not out.embedding[1:].any()


def test_default_init_keeps_gate_uniform():
    cfg = GeneratorConfig(2, 4, 2, 5)
    p = init_params(cfg, 0)
    assert not p["gate.weight"].any() and np.any(p["basis.weight"])
    x = build_input(np.ones((2, 6, 7)), _depth(), 2)
    np.testing.assert_allclose(forward(p, x).gating, 0.2, rtol=0, atol=1e-15)


def test_simplex_random_params():
    cfg = GeneratorConfig(3, 6, 2, 6)
    rng = np.random.default_rng(7)
    p = {k: rng.normal(0, 2.0, v.shape) for k, v in init_params(cfg, 0).items()}
    x = build_input(rng.normal(size=(3, 40, 30)), DepthMap.from_raw(rng.uniform(1, 9, (40, 30))), 3)
    g = forward(p, x).gating
    idx = rng.integers(0, 40 * 30, 1000)
    s = g.reshape(6, -1)[:, idx].sum(axis=0)
    assert np.max(np.abs(s - 1)) <= 1e-12
    assert g.min() >= 0


def test_coordinate_channels_only_path():
    # a constant scene under two coordinate conventions: outputs differ only via coord weights
    cfg = GeneratorConfig(1, 4, 2, 3)
    rng = np.random.default_rng(2)
    p = {k: rng.normal(0, 0.5, v.shape) for k, v in init_params(cfg, 0).items()}
    x = build_input(np.ones((1, 8, 9)), _depth(8, 9), 1)
    shifted = x.channels.copy()
    shifted[4:6] = 0.5 * (shifted[4:6] + 1.0)  # [0, 1] instead of [-1, 1]
    x2 = GeneratorInput(shifted, x.valid)
    assert not np.allclose(forward(p, x).embedding, forward(p, x2).embedding)
    p["conv0.weight"][:, 4:6] = 0.0
    np.testing.assert_array_equal(forward(p, x).embedding, forward(p, x2).embedding)


def test_dense_loss_cases():
    gt = DepthMap.from_raw(np.array([[2.0]]))
    assert loss_dense(gt, gt) == 0.0
    assert loss_dense(DepthMap.from_raw(np.array([[2.0 * np.exp(0.5)]])), gt) == pytest.approx(0.125)
    assert loss_dense(DepthMap.from_raw(np.array([[2.0 * np.exp(2.0)]])), gt) == pytest.approx(1.5)
    with pytest.raises(EmptyMaskError):
        loss_dense(DepthMap.from_raw(np.array([[0.0]])), gt)


def test_anchor_loss_cases():
    assert loss_anchor(np.ones((2, 1)), np.array([1.0]), np.array([0.0, 2.0])) == 1.0
    assert loss_anchor(np.array([[2.0]]), np.array([1.5]), np.array([3.0])) == 0.0


def test_decor_loss_cases():
    a = np.zeros((2, 2, 2))
    a[0, 0, 0] = 1.0
    a[1, 1, 1] = 3.0
    assert loss_decor(a) == 0.0
    same = np.stack([np.arange(4.0).reshape(2, 2)] * 2)
    assert loss_decor(same) == pytest.approx(1.0, abs=1e-15)
    flip = np.stack([same[0], -same[0]])
    assert loss_decor(flip) == pytest.approx(1.0, abs=1e-15)
    z = np.stack([same[0], np.zeros((2, 2)), same[0]])
    assert zero_norm_channels(z) == 1
    assert loss_decor(z) == pytest.approx(2 / 6, abs=1e-15)


def test_gate_loss_cases():
    k = 4
    assert loss_gate(np.full((k, 3, 3), 1 / k)) == pytest.approx(-np.log(k), abs=1e-15)
    onehot = np.zeros((k, 3, 3))
    onehot[2] = 1.0
    assert loss_gate(onehot) == 0.0
    assert loss_gate(np.full((2, 1, 1), 0.5)) == pytest.approx(-0.6931471805599453, abs=1e-15)


def test_breakdown_recomposes():
    params, prob, _ = toy_problem(1)
    lcfg = LossConfig()
    lb, _ = evaluate(params, prob, lcfg)
    recomposed = lb.dense + lcfg.lambda_anchor * lb.anchor + lcfg.lambda_decor * lb.decor + \
        lcfg.lambda_gate * lb.gate
    assert abs(lb.total - recomposed) <= 1e-12
    assert 0 <= lb.decor <= 1 and -np.log(4) - 1e-12 <= lb.gate <= 0


@pytest.mark.parametrize("seed", [0, 1])
@pytest.mark.parametrize("detach", [False, True])
def test_gradients_match_finite_differences(seed, detach):
    for r in toy_gradcheck(seed, n_probe=200, detach_solve=detach):
        assert r.n_probed >= 190, r
        assert r.rel_error <= 1e-6, r


def test_detached_gradient_differs_from_full():
    params, prob, gcfg = toy_problem(3)
    _, full = loss_and_grad(params, prob, LossConfig())
    _, det = loss_and_grad(params, prob, LossConfig(detach_solve=True))
    diff = sum(np.linalg.norm(full[k] - det[k]) for k in full)
    scale = sum(np.linalg.norm(full[k]) for k in full)
    assert diff > 1e-3 * scale


def test_perfect_fit_has_zero_gradient():
    # K = 1: E0 = 1, so with lambda = 0 the ridge weight is mean(y) and every residual vanishes
    cfg = GeneratorConfig(1, 4, 2, 1)
    rng = np.random.default_rng(4)
    p = {k: rng.normal(0, 0.5, v.shape) for k, v in init_params(cfg, 0).items()}
    mde = DepthMap.from_raw(rng.uniform(1, 5, (10, 12)))
    gt = DepthMap.from_raw(mde.values * 2.0)
    a = AnchorSet(tuple(Anchor(r, c, float(gt.values[r, c])) for r, c in [(1, 1), (5, 7), (8, 2)]))
    prob = make_problem(build_input(rng.normal(size=(1, 10, 12)), mde, 1), mde, gt, a)
    lcfg = LossConfig(lambda_decor=0.0, lambda_gate=0.0, ridge=0.0)
    lb, grads = loss_and_grad(p, prob, lcfg)
    assert lb.dense <= 1e-30 and lb.anchor <= 1e-30
    assert max(np.abs(g).max() for g in grads.values() if g.size) <= 1e-12


def test_kinks_are_skipped_not_counted():
    params, prob, gcfg = toy_problem(0)
    # a huge step flips ReLUs for many probes; they must be reported as skipped
    res = check_gradients(params, prob, gcfg, LossConfig(), terms=("dense",), n_probe=50, h=0.5)
    assert res[0].n_skipped > 0 and res[0].n_probed + res[0].n_skipped == 50


def test_param_shapes_order():
    names = [n for n, _ in param_shapes(GeneratorConfig(layers=2))]
    assert names == ["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias", "basis.weight",
                     "basis.bias", "gate.weight", "gate.bias"]
