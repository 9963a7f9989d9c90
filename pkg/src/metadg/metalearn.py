"""Regularized fine-grained meta-learning over N source domains.

Each iteration splits the sources into N-1 meta-train domains and one
meta-test domain, takes one inner step of the meta learner per meta-train
domain, and updates all three modules from one scalar objective::

    J = Ldep(test) + sum_i [ Lcls(train_i) + Ldep(train_i) + Lcls(test; M_i') ]
    M_i' = M - alpha * grad_M Lcls(train_i)

Because depth terms do not touch the meta learner and classification terms
do not touch the depth estimator, grad J restricted to each module is exactly
that module's update direction. Differentiating through M_i' is what couples
train and test gradients (the second-order term).

Variants: ``finegrained`` (above), ``aggregated`` (one pooled meta-train
batch, one inner step), ``first_order`` (M_i' treated as M plus a constant),
``erm`` (plain sum of losses over all sources) and ``noreg`` (finegrained
without depth terms).
"""

import json
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import tensor as T
from .datagen import Batch, sample_batch
from .nets import NetConfig, NetParams, classify, estimate_depth, feature_forward, init_params
from .tensor import ParamSet, Tape, Tensor, backward_grad

VARIANTS = ("finegrained", "aggregated", "first_order", "erm", "noreg")
OPTIMIZERS = ("adam", "sgd")
PROB_EPS = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-3
    beta: float = 1e-3
    batch_per_domain: int = 20
    iters: int = 0
    variant: str = "finegrained"
    optimizer: str = "adam"
    depth_weight: float = 1.0
    seed: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("alpha must be >= 0 and beta > 0")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.depth_weight < 0:
            raise ValueError("depth_weight must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SplitPlan:
    trn_indices: tuple
    val_index: int


@dataclass
class MetaBatch:
    train: list
    test: Batch


@dataclass
class TrainState:
    params: NetParams
    opt_state: dict = field(default_factory=dict)
    iter: int = 0
    rng_state: dict = None

    def rng(self):
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def init_state(net_cfg, cfg):
    rng = np.random.default_rng(cfg.seed)
    params = init_params(replace(net_cfg, seed=cfg.seed))
    opt_state = _init_opt(params, cfg)
    return TrainState(params=params, opt_state=opt_state, iter=0, rng_state=rng.bit_generator.state)


# ---------------------------------------------------------------------------
# domain split and losses


def split_domains(n_domains, rng):
    """Pick one meta-test domain uniformly; the rest are meta-train."""
    if n_domains < 2:
        raise ValueError(f"need at least 2 domains to split, got {n_domains}")
    val = int(rng.integers(n_domains))
    return SplitPlan(tuple(i for i in range(n_domains) if i != val), val)


def bce(prob, y):
    """Mean binary cross-entropy of probabilities ``prob`` (clamped) against labels."""
    return T.binary_cross_entropy(prob, y, PROB_EPS)


def _features(theta_F, batch, net_cfg, features):
    if features is not None:
        return features
    return feature_forward(theta_F, T.constant(batch.x), net_cfg)


def cls_loss(theta_F, theta_M, batch, net_cfg, features=None):
    if len(batch) == 0:
        raise ValueError("cls_loss: empty batch")
    f = _features(theta_F, batch, net_cfg, features)
    return bce(classify(theta_M, f, net_cfg), batch.y)


def depth_loss(theta_F, theta_D, batch, net_cfg, weight=1.0, features=None):
    """Mean squared depth error over samples and pixels, times ``weight``."""
    f = _features(theta_F, batch, net_cfg, features)
    err = T.sub(estimate_depth(theta_D, f, net_cfg), T.constant(batch.depth))
    loss = T.mean(T.square(err))
    return loss if weight == 1.0 else T.affine(loss, weight, 0.0)


def inner_update(theta_M, grad_M, alpha):
    """theta_M - alpha * grad_M, entrywise; stays on the tape when inputs are."""
    out = {}
    for k in theta_M:
        g = grad_M[k]
        if g.shape != theta_M[k].shape:
            raise T.ShapeError("inner_update", f"{k}: gradient shape {g.shape} != parameter shape {theta_M[k].shape}")
        out[k] = T.sub(theta_M[k], T.affine(g, alpha, 0.0))
    return ParamSet(out)


def meta_test_cls_loss(theta_F, updated, batch, net_cfg, features=None):
    """Sum over updated meta learners of the meta-test classification loss."""
    if not updated:
        raise ValueError("meta_test_cls_loss: no updated meta learners")
    f = _features(theta_F, batch, net_cfg, features)
    total = None
    for theta_Mi in updated:
        li = bce(classify(theta_Mi, f, net_cfg), batch.y)
        total = li if total is None else T.add(total, li)
    return total


def _sum(terms):
    total = None
    for t in terms:
        if t is not None:
            total = t if total is None else T.add(total, t)
    return total


# ---------------------------------------------------------------------------
# meta objective


def meta_objective(params, mb, cfg, net_cfg):
    """Build the variant's scalar objective on the tape of ``params``.

    Returns (J, parts) where parts holds the individual loss tensors and the
    number of inner updates performed.
    """
    variant = cfg.variant
    w = 0.0 if variant == "noreg" else cfg.depth_weight
    F, M, D = params.F, params.M, params.D
    parts = {"cls_train": [], "dep_train": [], "cls_test": [], "dep_test": None, "inner_updates": 0}

    if variant == "erm":
        for b in list(mb.train) + [mb.test]:
            f = _features(F, b, net_cfg, None)
            parts["cls_train"].append(cls_loss(F, M, b, net_cfg, features=f))
            if w > 0:
                parts["dep_train"].append(depth_loss(F, D, b, net_cfg, w, features=f))
        J = _sum(parts["cls_train"] + parts["dep_train"])
        return J, parts

    if not mb.train:
        raise ValueError("meta batch has no meta-train batches")
    train_batches = [Batch.concat(mb.train)] if variant == "aggregated" else list(mb.train)
    second_order = variant != "first_order"

    updated = []
    for b in train_batches:
        f = _features(F, b, net_cfg, None)
        lc = cls_loss(F, M, b, net_cfg, features=f)
        parts["cls_train"].append(lc)
        if w > 0:
            parts["dep_train"].append(depth_loss(F, D, b, net_cfg, w, features=f))
        g = backward_grad(lc, M, create_graph=second_order)
        if not second_order:
            g = g.detach()
        updated.append(inner_update(M, g, cfg.alpha))
        parts["inner_updates"] += 1

    ft = _features(F, mb.test, net_cfg, None)
    for theta_Mi in updated:
        parts["cls_test"].append(bce(classify(theta_Mi, ft, net_cfg), mb.test.y))
    if w > 0:
        parts["dep_test"] = depth_loss(F, D, mb.test, net_cfg, w, features=ft)
    J = _sum([parts["dep_test"]] + parts["cls_train"] + parts["dep_train"] + parts["cls_test"])
    return J, parts


def meta_grads(params, mb, cfg, net_cfg, return_parts=False):
    """Gradients of every module for one meta batch (detached ParamSets)."""
    if not mb.train and cfg.variant != "erm":
        raise ValueError("meta_grads: empty meta-train batch list")
    tape = Tape()
    p = params.attach(tape)
    J, parts = meta_objective(p, mb, cfg, net_cfg)
    grads = NetParams.split(backward_grad(J, p.all()))
    if return_parts:
        summary = {k: (float(v.data) if isinstance(v, Tensor) else v) for k, v in parts.items()
                   if not isinstance(v, list)}
        summary.update({k: [float(t.data) for t in v] for k, v in parts.items() if isinstance(v, list)})
        summary["objective"] = float(J.data)
        return grads, summary
    return grads


# ---------------------------------------------------------------------------
# optimization


def _init_opt(params, cfg):
    if cfg.optimizer == "sgd":
        return {}
    flat = params.all()
    return {
        "t": 0,
        "m": {k: np.zeros_like(v.data) for k, v in flat.items()},
        "v": {k: np.zeros_like(v.data) for k, v in flat.items()},
    }


def apply_update(params, grads, opt_state, cfg):
    """One optimizer step with rate beta; returns (params, opt_state), inputs untouched."""
    flat = params.all()
    gflat = grads.all()
    new = {}
    if cfg.optimizer == "sgd":
        for k, v in flat.items():
            new[k] = v.data - cfg.beta * gflat[k].data
        return NetParams.split(ParamSet.from_arrays(new)), {}
    t = opt_state["t"] + 1
    b1, b2, eps = cfg.adam_b1, cfg.adam_b2, cfg.adam_eps
    m_new, v_new = {}, {}
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, v in flat.items():
        g = gflat[k].data
        m = b1 * opt_state["m"][k] + (1.0 - b1) * g
        s = b2 * opt_state["v"][k] + (1.0 - b2) * g * g
        new[k] = v.data - cfg.beta * (m / c1) / (np.sqrt(s / c2) + eps)
        m_new[k], v_new[k] = m, s
    return NetParams.split(ParamSet.from_arrays(new)), {"t": t, "m": m_new, "v": v_new}


def sample_meta_batch(domains, cfg, rng):
    """Split the sources and draw one stratified batch per domain (in index order)."""
    plan = split_domains(len(domains), rng)
    batches = [sample_batch(d, cfg.batch_per_domain, rng) for d in domains]
    return plan, MetaBatch([batches[i] for i in plan.trn_indices], batches[plan.val_index])


def meta_step(state, domains, cfg, net_cfg):
    """One iteration; returns (new_state, stats)."""
    if len(domains) < 2:
        raise ValueError("meta_step needs at least two source domains")
    rng = state.rng()
    plan, mb = sample_meta_batch(domains, cfg, rng)
    grads, parts = meta_grads(state.params, mb, cfg, net_cfg, return_parts=True)
    params, opt_state = apply_update(state.params, grads, state.opt_state, cfg)
    parts["val_index"] = plan.val_index
    new_state = TrainState(params=params, opt_state=opt_state, iter=state.iter + 1,
                           rng_state=rng.bit_generator.state)
    return new_state, parts


def train(cfg, net_cfg, domains, state=None, callback=None, iters=None):
    """Run ``iters`` (default ``cfg.iters``) meta steps; returns (state, history).

    ``history`` holds one dict per iteration with the objective and its parts.
    ``callback(state, stats)`` runs after every step.
    """
    if len(domains) < 2:
        raise ValueError("train needs at least two source domains")
    if state is None:
        state = init_state(net_cfg, cfg)
    n = cfg.iters - state.iter if iters is None else iters
    history = []
    for _ in range(max(0, n)):
        state, stats = meta_step(state, domains, cfg, net_cfg)
        stats["iter"] = state.iter
        history.append(stats)
        if callback is not None:
            callback(state, stats)
    return state, history


# ---------------------------------------------------------------------------
# first-order expansion analysis


def taylor_residual_fn(loss_train, loss_test, theta, alpha):
    """|Ltest(theta') - [Ltest(theta) - alpha <grad Ltrain, grad Ltest>]|.

    ``loss_train``/``loss_test`` map a ParamSet on a tape to a scalar tensor;
    theta' = theta - alpha * grad Ltrain(theta).
    """
    tape = Tape()
    th = theta.attach(tape)
    lt = loss_train(th)
    g_trn = backward_grad(lt, th)
    ls = loss_test(th)
    g_tst = backward_grad(ls, th)
    dot = float(np.sum([np.vdot(g_trn[k].data, g_tst[k].data) for k in th]))
    updated = inner_update(theta.detach(), g_trn, alpha)
    tape2 = Tape()
    lhs = float(loss_test(updated.attach(tape2)).data)
    return abs(lhs - (float(ls.data) - alpha * dot))


def taylor_residual(params, mb, alpha, net_cfg, index=0):
    """Residual of the first-order expansion of the meta-test loss at the
    inner-updated meta learner for meta-train batch ``index`` (theta_F fixed)."""
    F = params.F.detach()
    b_trn = mb.train[index]
    f_trn = feature_forward(F, T.constant(b_trn.x), net_cfg)
    f_tst = feature_forward(F, T.constant(mb.test.x), net_cfg)

    def l_trn(M):
        return bce(classify(M, f_trn, net_cfg), b_trn.y)

    def l_tst(M):
        return bce(classify(M, f_tst, net_cfg), mb.test.y)

    return taylor_residual_fn(l_trn, l_tst, params.M, alpha)


# ---------------------------------------------------------------------------
# checkpoints


def _write_blob(path, arrays, dtype):
    with open(path, "wb") as fh:
        for k in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[k], dtype=dtype).tobytes())


def _read_blob(path, shapes, dtype):
    dt = np.dtype(dtype)
    total = int(np.sum([int(np.prod(s)) for s in shapes.values()]))
    size = os.path.getsize(path)
    if size != total * dt.itemsize:
        raise ValueError(f"{path}: expected {total * dt.itemsize} bytes, found {size}")
    raw = np.fromfile(path, dtype=dt)
    out, off = {}, 0
    for k in sorted(shapes):
        n = int(np.prod(shapes[k]))
        out[k] = raw[off:off + n].reshape(shapes[k]).astype(np.float64)
        off += n
    return out


def save_checkpoint(state, path, cfg=None, net_cfg=None, extra=None):
    """Write ``params.f64`` (exact), ``params.f32`` (portable), optimizer moments
    and ``checkpoint.json`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    arrays = state.params.all().arrays()
    _write_blob(os.path.join(path, "params.f64"), arrays, "<f8")
    _write_blob(os.path.join(path, "params.f32"), arrays, "<f4")
    meta = {
        "version": CHECKPOINT_VERSION,
        "names": list(arrays.keys()),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "params_file": "params.f64",
        "params_f32_file": "params.f32",
        "iter": int(state.iter),
        "rng_state": state.rng_state,
        "optimizer": None,
        "config": cfg.to_dict() if cfg is not None else None,
        "net_config": net_cfg.to_dict() if net_cfg is not None else None,
    }
    if state.opt_state:
        _write_blob(os.path.join(path, "opt_m.f64"), state.opt_state["m"], "<f8")
        _write_blob(os.path.join(path, "opt_v.f64"), state.opt_state["v"], "<f8")
        meta["optimizer"] = {"kind": "adam", "t": int(state.opt_state["t"]),
                             "moments_files": ["opt_m.f64", "opt_v.f64"]}
    if extra:
        meta.update(extra)
    with open(os.path.join(path, "checkpoint.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(path):
    """Returns (state, meta) where meta is the parsed checkpoint.json."""
    jpath = os.path.join(path, "checkpoint.json")
    with open(jpath) as fh:
        meta = json.load(fh)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{jpath}: unsupported checkpoint version {meta.get('version')!r}")
    shapes = {k: tuple(v) for k, v in meta["shapes"].items()}
    arrays = _read_blob(os.path.join(path, meta["params_file"]), shapes, "<f8")
    opt_state = {}
    if meta.get("optimizer"):
        mfile, vfile = meta["optimizer"]["moments_files"]
        opt_state = {
            "t": int(meta["optimizer"]["t"]),
            "m": _read_blob(os.path.join(path, mfile), shapes, "<f8"),
            "v": _read_blob(os.path.join(path, vfile), shapes, "<f8"),
        }
    state = TrainState(params=NetParams.split(ParamSet.from_arrays(arrays)), opt_state=opt_state,
                       iter=int(meta["iter"]), rng_state=meta["rng_state"])
    return state, meta
