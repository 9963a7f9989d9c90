"""Numerical self-verification used by ``metadg selftest``.

Every check returns a :class:`Check` carrying the measured value and the
tolerance it was held to. Relative gradient errors are
``max|g - fd| / max|fd|`` per tensor (the largest over tensors is reported).
"""

from dataclasses import dataclass, replace

import numpy as np

from . import metalearn as ml, metrics, tensor as T
from .datagen import Batch
from .nets import NetConfig, init_params
from .tensor import ParamSet, Tape, backward_grad


@dataclass
class Check:
    name: str
    value: float
    tolerance: str
    ok: bool


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.max(np.abs(b)) if b.size else 0.0
    diff = np.max(np.abs(a - b)) if a.size else 0.0
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def fd_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f(dict of arrays)`` w.r.t. every entry."""
    out = {}
    for k, v in arrays.items():
        g = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            old = v[i]
            v[i] = old + eps
            fp = f(arrays)
            v[i] = old - eps
            fm = f(arrays)
            v[i] = old
            g[i] = (fp - fm) / (2 * eps)
        out[k] = g
    return out


# ---------------------------------------------------------------------------
# per-operator cases: rng -> (function of tensors, input arrays)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _distinct(rng, shape):
    # values with pairwise gaps >= 1e-3 so max-pool argmaxes are stable
    n = int(np.prod(shape))
    return (rng.permutation(n) * 1e-2 + rng.uniform(0, 1e-3, n)).reshape(shape) / n * 10


OP_CASES = {
    "add": lambda r: (lambda a, b: T.add(a, b), [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": lambda r: (lambda a, b: T.sub(a, b), [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "mul": lambda r: (lambda a, b: T.mul(a, b), [r.normal(size=(2, 3, 2)), r.normal(size=(3, 1))]),
    "div": lambda r: (lambda a, b: T.div(a, b), [r.normal(size=(3, 2)), r.uniform(0.5, 2.0, size=(3, 2))]),
    "scalar_mul": lambda r: (lambda a: T.affine(a, -1.7, 0.3), [r.normal(size=(5,))]),
    "matmul": lambda r: (lambda a, b: T.matmul(a, b), [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "transpose": lambda r: (lambda a: T.transpose(a), [r.normal(size=(3, 2))]),
    "reshape": lambda r: (lambda a: T.reshape(a, (6, 2)), [r.normal(size=(3, 4))]),
    "relu": lambda r: (lambda a: T.relu(a), [_away_from_zero(r, (4, 5))]),
    "sigmoid": lambda r: (lambda a: T.sigmoid(a), [r.normal(size=(6,)) * 3]),
    "log": lambda r: (lambda a: T.log(a), [r.uniform(0.2, 3.0, size=(5,))]),
    "square": lambda r: (lambda a: T.square(a), [r.normal(size=(2, 3))]),
    "power": lambda r: (lambda a: T.power(a, -0.5), [r.uniform(0.5, 2.0, size=(4,))]),
    "mean": lambda r: (lambda a: T.mean(a, axes=(0, 2)), [r.normal(size=(2, 3, 4))]),
    "sum": lambda r: (lambda a: T.reduce_sum(a, axes=1, keepdims=True), [r.normal(size=(3, 4))]),
    "conv2d": lambda r: (lambda x, w: T.conv2d(x, w), [r.normal(size=(2, 3, 5, 5)), r.normal(size=(2, 3, 3, 3))]),
    "conv2d_stride2": lambda r: (lambda x, w: T.conv2d(x, w, stride=2),
                                 [r.normal(size=(2, 2, 6, 6)), r.normal(size=(3, 2, 3, 3))]),
    "maxpool2": lambda r: (lambda x: T.maxpool2(x), [_distinct(r, (2, 2, 4, 4))]),
    "concat": lambda r: (lambda a, b: T.concat([a, b], axis=1),
                         [r.normal(size=(2, 1, 2, 2)), r.normal(size=(2, 3, 2, 2))]),
    "global_avg_pool": lambda r: (lambda x: T.global_avg_pool(x), [r.normal(size=(2, 3, 4, 4))]),
    "standardize": lambda r: (lambda x, s, b: T.standardize(x, s, b),
                              [r.normal(size=(4, 3, 3, 3)), r.normal(size=(3,)), r.normal(size=(3,))]),
    "bce": lambda r: (lambda p: T.binary_cross_entropy(p, np.array([1.0, 0.0, 1.0, 0.0])),
                      [r.uniform(0.1, 0.9, size=(4,))]),
}


def op_gradient_error(name, rng):
    """Relative error of reverse-mode vs central differences for one random instance."""
    fn, arrays = OP_CASES[name](rng)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = fn(*[T.constant(a) for a in arrays]).shape
    w = rng.normal(size=out_shape)

    def scalar(tensors):
        return T.reduce_sum(T.mul(fn(*tensors), T.constant(w)))

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    params = ParamSet({f"in{i}": t for i, t in enumerate(leaves)})
    g = backward_grad(scalar(leaves), params)
    named = {f"in{i}": a.copy() for i, a in enumerate(arrays)}
    fd = fd_grad(lambda d: float(scalar([T.constant(d[f"in{i}"]) for i in range(len(arrays))]).data), named)
    return max(rel_err(g[k].data, fd[k]) for k in named)


# ---------------------------------------------------------------------------
# micro meta-learning problem


def micro_net():
    """A desk-preset net with 316 parameters on 3x4x4 inputs (1x1 depth map)."""
    return NetConfig(input_shape=(3, 4, 4), widths=(2, 2), meta_width=2, depth_width=2, seed=0)


def micro_batch(rng, net_cfg, n=4):
    x = rng.normal(size=(n,) + net_cfg.input_shape)
    y = np.array([1.0, 0.0] * (n // 2))
    depth = rng.uniform(0, 1, size=(n,) + net_cfg.depth_map_size) * y[:, None, None]
    return Batch(x, y, depth)


def micro_problem(seed=0, n_domains=3, variant="finegrained", alpha=1e-2):
    rng = np.random.default_rng(seed)
    net_cfg = micro_net()
    params = init_params(net_cfg)
    batches = [micro_batch(rng, net_cfg) for _ in range(n_domains)]
    mb = ml.MetaBatch(batches[:-1], batches[-1])
    cfg = ml.MetaConfig(alpha=alpha, variant=variant)
    return net_cfg, params, mb, cfg


def objective_value(params, mb, cfg, net_cfg):
    J, _ = ml.meta_objective(params.attach(Tape()), mb, cfg, net_cfg)
    return float(J.data)


def meta_grad_error(seed=0, alpha=1e-2, eps=1e-6):
    net_cfg, params, mb, cfg = micro_problem(seed, alpha=alpha)
    g = ml.meta_grads(params, mb, cfg, net_cfg)
    M = params.M.arrays()

    def f(arrs):
        p = ml.NetParams(params.F, ParamSet.from_arrays(arrs), params.D)
        return objective_value(p, mb, cfg, net_cfg)

    fd = fd_grad(f, {k: v.copy() for k, v in M.items()}, eps)
    return max(rel_err(g.M[k].data, fd[k]) for k in M)


def first_order_gap(alpha, seed=0):
    """||g_finegrained - g_first_order|| / ||g_finegrained|| for theta_M."""
    net_cfg, params, mb, cfg = micro_problem(seed, alpha=alpha)
    g2 = ml.meta_grads(params, mb, cfg, net_cfg).M
    g1 = ml.meta_grads(params, mb, replace_variant(cfg, "first_order"), net_cfg).M
    diff = np.sqrt(sum(np.sum((g2[k].data - g1[k].data) ** 2) for k in g2))
    norm = np.sqrt(sum(np.sum(g2[k].data ** 2) for k in g2))
    return float(diff / norm)


def replace_variant(cfg, variant):
    return replace(cfg, variant=variant)


def isolation_max(seed=0):
    """Largest |entry| of d(depth terms)/d theta_M and d(cls terms)/d theta_D."""
    net_cfg, params, mb, cfg = micro_problem(seed)
    tape = Tape()
    p = params.attach(tape)
    _, parts = ml.meta_objective(p, mb, cfg, net_cfg)
    dep = ml._sum(parts["dep_train"] + [parts["dep_test"]])
    cls = ml._sum(parts["cls_train"] + parts["cls_test"])
    gm = backward_grad(dep, p.M)
    gd = backward_grad(cls, p.D)
    return max(max(float(np.max(np.abs(v.data))) for v in gm.values()),
               max(float(np.max(np.abs(v.data))) for v in gd.values()))


TAYLOR_ALPHAS = (1e-2, 5e-3, 2.5e-3, 1.25e-3)


def taylor_slope(seed=0, alphas=TAYLOR_ALPHAS):
    net_cfg, params, mb, cfg = micro_problem(seed)
    res = np.array([ml.taylor_residual(params, mb, a, net_cfg) for a in alphas])
    slope = np.polyfit(np.log(alphas), np.log(res), 1)[0]
    return float(slope), res


def taylor_alpha0(seed=0):
    net_cfg, params, mb, cfg = micro_problem(seed)
    return ml.taylor_residual(params, mb, 0.0, net_cfg)


def linear_toy_residual(alphas=TAYLOR_ALPHAS + (0.1, 1.0)):
    """Residual when both losses are linear in theta (the expansion is exact)."""
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=5), rng.normal(size=5)
    theta = ParamSet.from_arrays({"w": rng.normal(size=5)})

    def l_trn(th):
        return T.reduce_sum(T.mul(th["w"], T.constant(a)))

    def l_tst(th):
        return T.affine(T.reduce_sum(T.mul(th["w"], T.constant(b))), 1.0, 0.5)

    return max(ml.taylor_residual_fn(l_trn, l_tst, theta, al) for al in alphas)


def auc_oracle_error(n_sets=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sets):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))  # rounding makes ties
        worst = max(worst, abs(metrics.auc(metrics.roc_curve(s, y)) - metrics.auc_pairs(s, y)))
    return worst


HTER_EXAMPLES = (
    # (scores, labels, threshold, expected)
    ((0.9, 0.8, 0.2, 0.1), (1, 1, 0, 0), 0.5, 0.0),
    ((0.9, 0.8, 0.2, 0.1), (1, 1, 0, 0), 0.0, 0.5),
    ((0.9, 0.2, 0.8, 0.1), (1, 1, 0, 0), 0.5, 0.5),
)


def hter_examples_error():
    return max(abs(metrics.hter(s, t, y) - e) for s, y, t, e in HTER_EXAMPLES)


def sgd_literal_error(seed=0, beta=0.05):
    """One SGD meta-step vs param - beta * grad, as max abs difference."""
    net_cfg, params, mb, cfg = micro_problem(seed)
    cfg = replace(cfg, optimizer="sgd", beta=beta)
    g = ml.meta_grads(params, mb, cfg, net_cfg)
    new, _ = ml.apply_update(params, g, {}, cfg)
    flat, gflat, nflat = params.all(), g.all(), new.all()
    return max(float(np.max(np.abs(nflat[k].data - (flat[k].data - beta * gflat[k].data)))) for k in flat)


def run_all(op_instances=3):
    rng = np.random.default_rng(0)
    out = []
    worst = max(op_gradient_error(name, rng) for name in OP_CASES for _ in range(op_instances))
    out.append(Check("op_gradients_vs_fd", worst, "< 1e-4", worst < 1e-4))
    e = meta_grad_error()
    out.append(Check("second_order_meta_grad_vs_fd", e, "< 1e-3", e < 1e-3))
    r0 = taylor_alpha0()
    out.append(Check("taylor_residual_alpha0", r0, "== 0", r0 == 0.0))
    slope, _ = taylor_slope()
    out.append(Check("taylor_loglog_slope", slope, "in [1.8, 2.2]", 1.8 <= slope <= 2.2))
    lin = linear_toy_residual()
    out.append(Check("taylor_linear_toy", lin, "< 1e-10", lin < 1e-10))
    small, big = first_order_gap(1e-6), first_order_gap(1e-2)
    out.append(Check("first_order_gap_alpha_1e-6", small, "< 1e-3", small < 1e-3))
    out.append(Check("first_order_gap_alpha_1e-2", big, "> 1e-3", big > 1e-3))
    iso = isolation_max()
    out.append(Check("gradient_isolation", iso, "== 0", iso == 0.0))
    a = auc_oracle_error(200)
    out.append(Check("auc_trapezoid_vs_pairs", a, "< 1e-12", a < 1e-12))
    h = hter_examples_error()
    out.append(Check("hter_worked_examples", h, "== 0", h == 0.0))
    s = sgd_literal_error()
    out.append(Check("sgd_step_literal", s, "< 1e-15", s < 1e-15))
    return out
