import numpy as np
import pytest

from metadg import tensor as T
from metadg.nets import (NetConfig, NetParams, classify, desk_param_count, estimate_depth, feature_forward,
                         init_params, meta_features, param_shapes)
from metadg.tensor import ParamSet, ShapeError, Tape, backward_grad


def small_cfg(**kw):
    base = dict(input_shape=(3, 16, 16), widths=(4, 8), meta_width=8, depth_width=8, seed=3)
    base.update(kw)
    return NetConfig(**base)


def test_init_deterministic():
    a = init_params(small_cfg())
    b = init_params(small_cfg())
    assert a.all().equal(b.all())
    c = init_params(small_cfg(seed=4))
    assert not a.all().equal(c.all())


def test_biases_zero_and_weight_scale():
    cfg = NetConfig()
    p = init_params(cfg).all()
    for k in p:
        if k.endswith(".bias") or k.endswith(".shift"):
            assert np.all(p[k].data == 0.0)
        if k.endswith(".scale"):
            assert np.all(p[k].data == 1.0)
    w = p["F.b2.conv2.weight"].data
    fan_in = np.prod(w.shape[1:])
    assert w.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.05)


def test_namespaces_disjoint():
    p = init_params(NetConfig())
    assert all(k.startswith("F.") for k in p.F)
    assert all(k.startswith("M.") for k in p.M)
    assert all(k.startswith("D.") for k in p.D)
    assert len(p.all()) == len(p.F) + len(p.M) + len(p.D)


@pytest.mark.parametrize("widths,m,d,c", [((32, 64), 64, 32, 3), ((4, 8), 8, 8, 3), ((2, 2), 2, 2, 3),
                                          ((5, 7), 3, 4, 6)])
def test_desk_param_count_formula(widths, m, d, c):
    cfg = NetConfig(input_shape=(c, 8, 8), widths=widths, meta_width=m, depth_width=d)
    w1, w2 = widths
    expected = (9 * c * w1 + 9 * w1 * w1 + 9 * w1 * w2 + 9 * w2 * w2 + 4 * (w1 + w2)
                + 9 * w2 * m + 2 * m + m + 1
                + 9 * (w1 + w2) * d + 2 * d + 9 * d + 1)
    assert init_params(cfg).num_values() == expected == desk_param_count(cfg)
    assert sum(int(np.prod(s)) for s in param_shapes(cfg).values()) == expected


def test_desk_default_shapes():
    cfg = NetConfig()
    assert cfg.depth_map_size == (8, 8)
    p = init_params(cfg)
    x = T.constant(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    f = feature_forward(p.F, x, cfg)
    assert f.pool1.shape == (2, 64, 8, 8)
    assert f.skip.shape == (2, 32 + 64, 8, 8)
    assert classify(p.M, f, cfg).shape == (2,)
    assert estimate_depth(p.D, f, cfg).shape == (2, 8, 8)


@pytest.mark.parametrize("n", [1, 3])
def test_batch_sizes(n):
    cfg = small_cfg()
    p = init_params(cfg)
    x = T.constant(np.random.default_rng(n).uniform(size=(n, 3, 16, 16)))
    f = feature_forward(p.F, x, cfg)
    prob = classify(p.M, f, cfg).data
    assert prob.shape == (n,) and np.all((prob > 0) & (prob < 1))
    assert estimate_depth(p.D, f, cfg).shape == (n, 4, 4)


def test_skip_channels_sum_of_stages():
    cfg = small_cfg(widths=(3, 5))
    p = init_params(cfg)
    f = feature_forward(p.F, T.constant(np.ones((2, 3, 16, 16))), cfg)
    assert f.skip.shape[1] == sum(s.shape[1] for s in f.stages) == 8


def test_zero_fc_gives_half():
    cfg = small_cfg()
    p = init_params(cfg)
    arrays = p.M.arrays()
    arrays["M.fc.weight"] = np.zeros_like(arrays["M.fc.weight"])
    M = ParamSet.from_arrays(arrays)
    x = T.constant(np.random.default_rng(1).normal(size=(5, 3, 16, 16)))
    prob = classify(M, feature_forward(p.F, x, cfg), cfg).data
    assert np.all(prob == 0.5)


def test_zero_weights_give_zero_maps():
    cfg = small_cfg()
    z = init_params(cfg).all().map(lambda t: T.constant(np.zeros(t.shape)))
    p = NetParams.split(z)
    f = feature_forward(p.F, T.constant(np.zeros((2, 3, 16, 16))), cfg)
    assert np.all(f.pool1.data == 0.0) and np.all(f.skip.data == 0.0)
    x = T.constant(np.random.default_rng(0).normal(size=(2, 3, 16, 16)))
    assert np.all(estimate_depth(p.D, feature_forward(p.F, x, cfg), cfg).data == 0.0)


def test_forward_is_pure():
    cfg = small_cfg()
    p = init_params(cfg)
    x = T.constant(np.random.default_rng(2).normal(size=(4, 3, 16, 16)))
    a = classify(p.M, feature_forward(p.F, x, cfg), cfg).data
    b = classify(p.M, feature_forward(p.F, x, cfg), cfg).data
    assert np.array_equal(a, b)


def test_input_shape_mismatch():
    cfg = small_cfg()
    p = init_params(cfg)
    with pytest.raises(ShapeError):
        feature_forward(p.F, T.constant(np.zeros((2, 3, 8, 8))), cfg)
    with pytest.raises(ShapeError):
        feature_forward(p.F, T.constant(np.zeros((3, 16, 16))), cfg)


def test_bad_configs():
    with pytest.raises(ValueError):
        NetConfig(preset="huge")
    with pytest.raises(ValueError):
        NetConfig(input_shape=(3, 10, 10))
    with pytest.raises(ValueError):
        NetConfig(preset="paper", input_shape=(3, 32, 32))


def test_gradient_flow_separation():
    cfg = small_cfg()
    p = init_params(cfg)
    tape = Tape()
    q = p.attach(tape)
    x = T.constant(np.random.default_rng(0).normal(size=(2, 3, 16, 16)))
    f = feature_forward(q.F, x, cfg)
    prob = T.reduce_sum(classify(q.M, f, cfg))
    depth = T.reduce_sum(estimate_depth(q.D, f, cfg))
    g = backward_grad(prob, q.D)
    assert all(np.all(g[k].data == 0.0) for k in g)
    g = backward_grad(depth, q.M)
    assert all(np.all(g[k].data == 0.0) for k in g)


def test_paper_preset_layout():
    cfg = NetConfig.paper()
    assert cfg.depth_map_size == (32, 32)
    shapes = param_shapes(cfg)
    # trunk: 10 convs ending in 128 channels; meta learner 128 -> 256 -> 512 -> fc
    assert shapes["F.conv1_10.weight"] == (128, 196, 3, 3)
    assert shapes["M.conv2_1.weight"] == (128, 128, 3, 3)
    assert shapes["M.conv2_2.weight"] == (256, 128, 3, 3)
    assert shapes["M.conv2_3.weight"] == (512, 256, 3, 3)
    assert shapes["M.fc.weight"] == (512, 1)
    assert shapes["D.conv3_1.weight"] == (128, 3 * 128, 3, 3)
    assert shapes["D.conv3_3.weight"] == (1, 64, 3, 3)


@pytest.mark.slow
def test_paper_preset_forward_shapes():
    cfg = NetConfig.paper()
    p = init_params(cfg)
    x = T.constant(np.random.default_rng(0).uniform(size=(1, 6, 256, 256)))
    f = feature_forward(p.F, x, cfg)
    assert f.pool1.shape == (1, 128, 32, 32)
    assert f.skip.shape == (1, 384, 32, 32)
    assert classify(p.M, f, cfg).shape == (1,)
    assert estimate_depth(p.D, f, cfg).shape == (1, 32, 32)
    assert meta_features(p.M, f, cfg).shape == (1, 512, 8, 8)
