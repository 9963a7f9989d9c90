import numpy as np
import pytest

from metadg import tensor as T
from metadg.tensor import ParamSet, ShapeError, Tape, TapeError, backward_grad, finite_diff_grad

from conftest import central_diff, max_rel_err


def leaf(v, tape=None):
    tape = tape or Tape()
    return tape.leaf(v)


def brute_conv(x, w, stride=1, pad=1):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    win = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, oc, i, j] = np.sum(win * w[oc])
    return out


# ---------------------------------------------------------------------------
# forward values


def test_add_scalars():
    assert float(T.add(T.constant(2.0), T.constant(3.0)).data) == 5.0


def test_sigmoid_zero():
    assert float(T.sigmoid(T.constant(0.0)).data) == 0.5


def test_apply_by_name():
    out = T.apply("add", (T.constant([1.0]), T.constant([2.0])))
    assert out.data.tolist() == [3.0]
    with pytest.raises(ValueError):
        T.apply("no_such_op", (T.constant(1.0),))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_sliding_window(rng, stride):
    x = rng.normal(size=(1, 1, 4, 4))
    w = rng.normal(size=(1, 1, 3, 3))
    got = T.conv2d(T.constant(x), T.constant(w), stride=stride).data
    np.testing.assert_allclose(got, brute_conv(x, w, stride), rtol=0, atol=1e-12)


def test_conv2d_multichannel(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    got = T.conv2d(T.constant(x), T.constant(w)).data
    np.testing.assert_allclose(got, brute_conv(x, w), rtol=0, atol=1e-12)


def test_maxpool_and_gap(rng):
    x = rng.normal(size=(2, 3, 4, 6))
    mp = T.maxpool2(T.constant(x)).data
    ref = x.reshape(2, 3, 2, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(mp, ref)
    gap = T.global_avg_pool(T.constant(x)).data
    np.testing.assert_allclose(gap, x.mean(axis=(2, 3)), atol=1e-15)


def test_standardize_forward(rng):
    x = rng.normal(2.0, 3.0, size=(8, 3, 2, 2))
    s = rng.normal(size=3)
    b = rng.normal(size=3)
    out = T.standardize(T.constant(x), T.constant(s), T.constant(b)).data
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * s[None, :, None, None] + b[None, :, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_bce_forward_clamps():
    p = T.constant([1.0, 0.0, 0.5])
    y = np.array([0.0, 1.0, 1.0])
    v = float(T.binary_cross_entropy(p, y).data)
    pc = np.clip([1.0, 0.0, 0.5], 1e-12, 1 - 1e-12)
    ref = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    assert ref > 18.0
    assert v == pytest.approx(ref, rel=1e-12)


# ---------------------------------------------------------------------------
# errors


def test_shape_errors_name_op():
    with pytest.raises(ShapeError) as e:
        T.add(T.constant(np.zeros((2, 3))), T.constant(np.zeros((4,))))
    assert e.value.op == "add" and "(2, 3)" in str(e.value)
    with pytest.raises(ShapeError) as e:
        T.matmul(T.constant(np.zeros((2, 3))), T.constant(np.zeros((2, 3))))
    assert e.value.op == "matmul"
    with pytest.raises(ShapeError):
        T.conv2d(T.constant(np.zeros((1, 2, 4, 4))), T.constant(np.zeros((1, 3, 3, 3))))


def test_log_nonpositive_raises():
    with pytest.raises(ValueError):
        T.log(T.constant([1.0, 0.0]))
    with pytest.raises(ValueError):
        T.log(T.constant([-1.0]))


def test_backward_errors():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        backward_grad(T.square(x), ParamSet({"x": x}))
    other = Tape().leaf(1.0)
    with pytest.raises(TapeError):
        backward_grad(T.reduce_sum(T.square(x)), ParamSet({"x": other}))
    with pytest.raises(TapeError):
        T.add(x, Tape().leaf([1.0, 1.0]))


def test_finite_diff_rejects_bad_input():
    p = ParamSet.from_arrays({"a": [1.0]})
    with pytest.raises(ValueError):
        finite_diff_grad(lambda q: 0.0, p, eps=0.0)
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda q: float("nan"), p)


# ---------------------------------------------------------------------------
# gradients


def test_square_gradient():
    x = leaf(3.0)
    g = backward_grad(T.mul(x, x), ParamSet({"x": x}))
    assert float(g["x"].data) == 6.0


def test_second_order_cube():
    x = leaf(2.0)
    p = ParamSet({"x": x})
    g = backward_grad(T.mul(T.mul(x, x), x), p, create_graph=True)["x"]
    gg = backward_grad(g, p)["x"]
    assert float(gg.data) == pytest.approx(12.0, abs=1e-12)


def test_scalar_maml_composite():
    alpha = 0.1
    theta = leaf(2.0)
    p = ParamSet({"t": theta})
    l1 = T.scalar_mul(T.square(theta), 0.5)
    g1 = backward_grad(l1, p, create_graph=True)["t"]
    theta2 = T.sub(theta, T.scalar_mul(g1, alpha))
    l2 = T.scalar_mul(T.square(theta2), 0.5)
    g = backward_grad(l2, p)["t"]
    assert float(g.data) == pytest.approx(2 * 0.9 ** 2, abs=1e-12)


def test_finite_diff_quadratic():
    p = ParamSet.from_arrays({"v": [1.0, 2.0]})
    g = finite_diff_grad(lambda q: T.reduce_sum(T.square(q["v"])), p, eps=1e-5)
    np.testing.assert_allclose(g["v"].data, [2.0, 4.0], atol=1e-8)


def test_finite_diff_constant():
    p = ParamSet.from_arrays({"v": np.arange(4.0)})
    g = finite_diff_grad(lambda q: 3.5, p)
    assert np.all(np.abs(g["v"].data) <= 1e-10)


def _two_layer(rng):
    arrays = {"w1": rng.normal(size=(5, 4)) * 0.5, "b1": rng.normal(size=(4,)) * 0.1,
              "w2": rng.normal(size=(4, 1)) * 0.5, "b2": rng.normal(size=(1,)) * 0.1}
    x = rng.normal(size=(6, 5))
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 0.0])

    def loss(p):
        h = T.relu(T.add(T.matmul(T.constant(x), p["w1"]), p["b1"]))
        z = T.add(T.matmul(h, p["w2"]), p["b2"])
        prob = T.sigmoid(T.reshape(z, (6,)))
        return T.binary_cross_entropy(prob, y)

    return arrays, loss


def test_two_layer_net_matches_fd(rng):
    arrays, loss = _two_layer(rng)
    tape = Tape()
    p = ParamSet.from_arrays(arrays).attach(tape)
    g = backward_grad(loss(p), p)
    fd = finite_diff_grad(loss, ParamSet.from_arrays(arrays))
    for k in arrays:
        assert max_rel_err(g[k].data, fd[k].data) < 1e-4


def test_two_layer_net_matches_independent_oracle(rng):
    arrays, loss = _two_layer(rng)
    tape = Tape()
    p = ParamSet.from_arrays(arrays).attach(tape)
    g = backward_grad(loss(p), p)
    fd = central_diff(lambda a: float(loss(ParamSet.from_arrays(a)).data),
                      {k: v.copy() for k, v in arrays.items()})
    for k in arrays:
        assert max_rel_err(g[k].data, fd[k]) < 1e-4


def test_gradient_norm_squared_second_order(rng):
    arrays, loss = _two_layer(rng)

    def gg(a):
        tape = Tape()
        p = ParamSet.from_arrays(a).attach(tape)
        g = backward_grad(loss(p), p, create_graph=True)
        total = None
        for k in p:
            term = T.reduce_sum(T.square(g[k]))
            total = term if total is None else T.add(total, term)
        return total, p

    total, p = gg(arrays)
    got = backward_grad(total, p)
    fd = central_diff(lambda a: float(gg({k: np.array(v) for k, v in a.items()})[0].data),
                      {k: v.copy() for k, v in arrays.items()})
    for k in arrays:
        assert max_rel_err(got[k].data, fd[k]) < 1e-3


@pytest.mark.parametrize("name", sorted(__import__("metadg.selftest", fromlist=["OP_CASES"]).OP_CASES))
def test_operator_gradients_vs_central_diff(name, rng):
    from metadg.selftest import OP_CASES
    for _ in range(3):
        fn, arrays = OP_CASES[name](rng)
        arrays = {f"a{i}": np.array(a, dtype=np.float64) for i, a in enumerate(arrays)}
        keys = sorted(arrays)
        w = rng.normal(size=fn(*[T.constant(arrays[k]) for k in keys]).shape)

        def f(a):
            return float(np.sum(fn(*[T.constant(a[k]) for k in keys]).data * w))

        tape = Tape()
        leaves = [tape.leaf(arrays[k]) for k in keys]
        out = T.reduce_sum(T.mul(fn(*leaves), T.constant(w)))
        g = backward_grad(out, ParamSet(dict(zip(keys, leaves))))
        fd = central_diff(f, {k: v.copy() for k, v in arrays.items()})
        for k in keys:
            assert max_rel_err(g[k].data, fd[k]) < 1e-4, (name, k)


@pytest.mark.parametrize("name", ["standardize", "bce", "conv2d", "maxpool2", "div", "power"])
def test_taped_and_numpy_adjoints_agree(name, rng):
    from metadg.selftest import OP_CASES
    fn, arrays = OP_CASES[name](rng)
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    w = rng.normal(size=fn(*leaves).shape)
    out = T.reduce_sum(T.mul(fn(*leaves), T.constant(w)))
    p = ParamSet({f"a{i}": t for i, t in enumerate(leaves)})
    fast = backward_grad(out, p)
    taped = backward_grad(out, p, create_graph=True)
    for k in p:
        np.testing.assert_allclose(fast[k].data, taped[k].data, rtol=1e-12, atol=1e-13)


def test_fused_ops_second_order(rng):
    """Gradient-of-gradient through standardize and bce against central differences."""
    x0 = rng.normal(size=(6, 2))
    s0 = rng.normal(size=2)
    y = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])

    def build(a):
        tape = Tape()
        p = ParamSet.from_arrays(a).attach(tape)
        h = T.standardize(T.constant(x0), p["s"], p["b"])
        prob = T.sigmoid(T.reduce_sum(h, axes=1))
        loss = T.binary_cross_entropy(prob, y)
        g = backward_grad(loss, p, create_graph=True)
        return T.add(T.reduce_sum(T.square(g["s"])), T.reduce_sum(T.square(g["b"]))), p

    arrays = {"s": s0, "b": rng.normal(size=2)}
    total, p = build(arrays)
    got = backward_grad(total, p)
    fd = central_diff(lambda a: float(build(a)[0].data), {k: v.copy() for k, v in arrays.items()})
    for k in arrays:
        assert max_rel_err(got[k].data, fd[k]) < 1e-3


def test_disconnected_parameters_get_exact_zeros():
    tape = Tape()
    a = tape.leaf([1.0, 2.0])
    b = tape.leaf(np.ones((2, 2)))
    loss = T.reduce_sum(T.square(a))
    for cg in (False, True):
        g = backward_grad(loss, ParamSet({"a": a, "b": b}), create_graph=cg)
        assert np.array_equal(g["b"].data, np.zeros((2, 2)))
        assert np.all(g["b"].data == 0.0)


def test_constant_loss_gradient_is_zero():
    tape = Tape()
    a = tape.leaf([1.0])
    g = backward_grad(T.constant(4.0), ParamSet({"a": a}))
    assert g["a"].data.tolist() == [0.0]


# ---------------------------------------------------------------------------
# tape and paramset invariants


def test_taped_values_are_immutable():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    y = T.square(x)
    with pytest.raises(ValueError):
        x.data[0] = 5.0
    with pytest.raises(ValueError):
        y.data[0] = 5.0


def test_leaf_copies_input():
    v = np.array([1.0, 2.0])
    x = Tape().leaf(v)
    v[0] = 9.0
    assert x.data[0] == 1.0


def test_tape_topological_and_replay(rng):
    arrays, loss = _two_layer(rng)
    tape = Tape()
    p = ParamSet.from_arrays(arrays).attach(tape)
    out = loss(p)
    for i, node in enumerate(tape.nodes):
        assert all(j is None or j < i for j in node.in_ids)
    vals = tape.replay()
    for node, v in zip(tape.nodes, vals):
        assert np.array_equal(node.out, v)
    assert np.array_equal(vals[out.node_id], out.data)


def test_determinism_bitwise(rng):
    arrays, loss = _two_layer(rng)
    results = []
    for _ in range(2):
        tape = Tape()
        p = ParamSet.from_arrays(arrays).attach(tape)
        out = loss(p)
        g = backward_grad(out, p, create_graph=True)
        results.append((out.data.copy(), {k: g[k].data.copy() for k in g}))
    assert np.array_equal(results[0][0], results[1][0])
    for k in arrays:
        assert np.array_equal(results[0][1][k], results[1][1][k])


def test_paramset_order_and_helpers():
    p = ParamSet.from_arrays({"b.w": [1.0], "a.w": [2.0, 3.0], "a.b": [4.0]})
    assert p.keys() == ["a.b", "a.w", "b.w"]
    assert p.num_values() == 4
    assert p.flat().tolist() == [4.0, 2.0, 3.0, 1.0]
    assert p.subset("a.").keys() == ["a.b", "a.w"]
    q = p.map(lambda t: T.scalar_mul(t, 2.0))
    assert q["a.w"].data.tolist() == [4.0, 6.0]
    assert p.equal(p.detach()) and not p.equal(q)
    with pytest.raises(KeyError):
        p.merge(ParamSet.from_arrays({"a.b": [0.0]}))
    merged = p.subset("a.").merge(p.subset("b."))
    assert merged.equal(p)
