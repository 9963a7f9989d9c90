"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 to 9 read the desk benchmark ablation from ``results/ablation``
(or ``$METADG_ABLATION_DIR``). Missing cells are computed first, which takes
hours on one core; ``metadg ablate --out results/ablation`` produces them.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from metadg import cli, datagen, metalearn as ml, selftest as st, tensor as T
from metadg.nets import init_params
from metadg.tensor import ParamSet, Tape, backward_grad

from conftest import central_diff, max_rel_err

ROOT = Path(__file__).resolve().parents[1]
ABLATION_DIR = Path(os.environ.get("METADG_ABLATION_DIR", ROOT / "results" / "ablation"))
LEAVE_OUTS = ("O", "C", "I", "M")
RUNTIME_BUDGET = 30 * 60


def _op_error(name, rng):
    """Entrywise relative error (denominators floored at 1e-8) of reverse mode
    against central differences with eps = 1e-5, for one random instance."""
    fn, arrays = st.OP_CASES[name](rng)
    arrays = {f"a{i}": np.array(a, dtype=np.float64) for i, a in enumerate(arrays)}
    keys = sorted(arrays)
    w = rng.normal(size=fn(*[T.constant(arrays[k]) for k in keys]).shape)
    tape = Tape()
    leaves = [tape.leaf(arrays[k]) for k in keys]
    g = backward_grad(T.reduce_sum(T.mul(fn(*leaves), T.constant(w))), ParamSet(dict(zip(keys, leaves))))
    fd = central_diff(lambda a: float(np.sum(fn(*[T.constant(a[k]) for k in keys]).data * w)),
                      {k: v.copy() for k, v in arrays.items()}, eps=1e-5)
    return max(max_rel_err(g[k].data, fd[k], floor=1e-8) for k in keys)


def test_c01_operator_gradients(criterion):
    rng = np.random.default_rng(0)
    t0 = time.time()
    errs = {name: max(_op_error(name, rng) for _ in range(20)) for name in st.OP_CASES}
    dt = time.time() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and dt < 60
    criterion(1, ok, f"{len(errs)} ops x 20 instances, max rel err {errs[worst]:.2e} ({worst}), {dt:.1f}s")
    assert ok


def test_c02_second_order_meta_gradient(criterion):
    net_cfg = st.micro_net()
    n = sum(v.data.size for v in init_params(net_cfg).all().values())
    t0 = time.time()
    e = st.meta_grad_error()
    dt = time.time() - t0
    _, _, mb, _ = st.micro_problem()
    n_domains = len(mb.train) + 1
    ok = e < 1e-3 and dt < 60 and n <= 500 and n_domains == 3
    criterion(2, ok, f"max rel err {e:.2e} on a {n}-parameter net, N={n_domains}, {dt:.1f}s")
    assert ok


def test_c03_taylor_analysis(criterion):
    r0 = st.taylor_alpha0()
    slope, res = st.taylor_slope(alphas=(1e-2, 5e-3, 2.5e-3, 1.25e-3))
    lin = st.linear_toy_residual()
    ok = r0 == 0.0 and 1.8 <= slope <= 2.2 and lin < 1e-10
    criterion(3, ok, f"residual(0)={r0}, slope {slope:.3f}, linear toy {lin:.1e}")
    assert ok


def test_c04_first_order_gap(criterion):
    small, big = st.first_order_gap(1e-6), st.first_order_gap(1e-2)
    ok = small < 1e-3 and big > 1e-3
    criterion(4, ok, f"gap {small:.2e} at alpha=1e-6, {big:.2e} at alpha=1e-2")
    assert ok


def test_c05_gradient_isolation(criterion):
    iso = st.isolation_max()
    ok = iso == 0.0
    criterion(5, ok, f"largest cross-term entry {iso}")
    assert ok


def test_c06_metric_oracles(criterion):
    a = st.auc_oracle_error(1000)
    h = st.hter_examples_error()
    ok = a < 1e-12 and h == 0.0
    criterion(6, ok, f"AUC trapezoid vs pairs {a:.1e} over 1000 sets, HTER examples error {h}")
    assert ok


# ---------------------------------------------------------------------------
# benchmark protocol


@pytest.fixture(scope="module")
def ablation():
    run = cli.resolve({}, cli.BENCHMARK)
    summary = ABLATION_DIR / "summary.json"
    if not summary.exists():
        cli.run_ablation(run, str(ABLATION_DIR), n_workers=cli.threads())
    cells = [json.loads(line) for line in open(ABLATION_DIR / "cells.jsonl") if line.strip()]
    used = json.loads((ABLATION_DIR / "config.json").read_text())
    digest = cli.dataset_digest(cli.load_domains(run))
    # results must come from the current benchmark, not a stale one
    assert used["iters"] == 2000 and used["seeds"] == 10, used
    assert {c["data_sha256"] for c in cells} == {digest}
    return cells


def _values(cells, variant, key):
    """(per-leave-out arrays, overall mean, standard error of the mean).

    The mean is balanced over the four held-out domains, so its standard error
    is stratified: sqrt(sum_d s_d^2 / n_d) / 4.
    """
    per = {lo: np.array([c[key] for c in cells if c["variant"] == variant and c["leave_out"] == lo])
           for lo in LEAVE_OUTS}
    assert all(len(v) == 10 for v in per.values()), {lo: len(v) for lo, v in per.items()}
    mean = float(np.mean([v.mean() for v in per.values()]))
    se = float(np.sqrt(sum(v.var(ddof=1) / len(v) for v in per.values())) / len(per))
    return per, mean, se


def _fmt(mean, per):
    std = np.concatenate(list(per.values())).std(ddof=1)
    return f"{mean:.4f}±{std:.4f}"


def test_c07_finegrained_beats_erm(ablation, criterion):
    pa, fg_auc, fg_auc_se = _values(ablation, "finegrained", "auc")
    pb, erm_auc, erm_auc_se = _values(ablation, "erm", "auc")
    ph, fg_h, fg_h_se = _values(ablation, "finegrained", "hter")
    pe, erm_h, erm_h_se = _values(ablation, "erm", "hter")
    se_auc = np.hypot(fg_auc_se, erm_auc_se)
    se_h = np.hypot(fg_h_se, erm_h_se)
    seconds = sum(c["seconds"] for c in ablation if c["variant"] in ("finegrained", "erm"))
    ok_auc = fg_auc - erm_auc > se_auc
    ok_h = erm_h - fg_h > se_h
    ok_time = seconds < RUNTIME_BUDGET
    ok = ok_auc and ok_h and ok_time
    criterion(7, ok, f"AUC fg {_fmt(fg_auc, pa)} vs erm {_fmt(erm_auc, pb)} (diff {fg_auc - erm_auc:+.4f}, "
                     f"pooled SE {se_auc:.4f}); HTER fg {_fmt(fg_h, ph)} vs erm {_fmt(erm_h, pe)} "
                     f"(diff {fg_h - erm_h:+.4f}, pooled SE {se_h:.4f}); runtime {seconds / 60:.1f} min")
    assert ok_auc, "finegrained AUC does not beat erm by one pooled SE"
    assert ok_h, "finegrained HTER does not beat erm by one pooled SE"
    assert ok_time, f"protocol took {seconds / 60:.1f} min"


def test_c08_finegrained_vs_aggregated_and_first_order(ablation, criterion):
    ph, fg, _ = _values(ablation, "finegrained", "hter")
    pa, agg, _ = _values(ablation, "aggregated", "hter")
    pf, fo, _ = _values(ablation, "first_order", "hter")
    ok = fg <= agg and fg <= fo
    criterion(8, ok, f"HTER fg {_fmt(fg, ph)}, aggregated {_fmt(agg, pa)}, first_order {_fmt(fo, pf)}")
    assert ok


def test_c09_regularization_ablation(ablation, criterion):
    p1, fg, _ = _values(ablation, "finegrained", "auc")
    p2, noreg, _ = _values(ablation, "noreg", "auc")
    p3, erm, _ = _values(ablation, "erm", "auc")
    ok = fg > noreg and fg > erm
    criterion(9, ok, f"AUC fg {_fmt(fg, p1)}, noreg {_fmt(noreg, p2)}, erm {_fmt(erm, p3)}")
    assert ok


# ---------------------------------------------------------------------------
# determinism and the literal update


SMALL = {"synth": {"n_per_class": 10, "image_size": 16, "depth_size": 4, "seed": 2},
         "widths": [2, 4], "meta_width": 4, "depth_width": 4, "batch_per_domain": 4,
         "iters": 6, "checkpoint_every": 3, "seed": 4}


def _small_run(out, resume=None):
    run = cli.resolve(SMALL)
    return cli.run_training(run, cli.load_domains(run), out=str(out), resume=resume)


def test_c10_determinism_and_persistence(tmp_path, criterion):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    ra, rb = _small_run(a), _small_run(b)
    same_run = (a / "checkpoint" / "params.f64").read_bytes() == (b / "checkpoint" / "params.f64").read_bytes()
    same_run &= [h["objective"] for h in ra["history"]] == [h["objective"] for h in rb["history"]]

    _small_run(c, resume=str(a / "checkpoints" / "iter_000003"))
    resumed = (a / "checkpoint" / "params.f64").read_bytes() == (c / "checkpoint" / "params.f64").read_bytes()
    resumed &= (a / "metrics.json").read_text() == (c / "metrics.json").read_text()

    domains = cli.load_domains(cli.resolve(SMALL))
    datagen.save_dataset(domains, tmp_path / "data")
    back = datagen.load_dataset(tmp_path / "data")
    data_rt = cli.dataset_digest(back) == cli.dataset_digest(domains)

    state, _ = ml.load_checkpoint(a / "checkpoint")
    ml.save_checkpoint(state, tmp_path / "again", ra["cfg"], ra["net_cfg"])
    state2, _ = ml.load_checkpoint(tmp_path / "again")
    p1, p2 = state.params.all(), state2.params.all()
    ckpt_rt = all(p1[k].data.tobytes() == p2[k].data.tobytes() for k in p1)
    live = ra["state"].params.all()
    ckpt_rt &= all(live[k].data.tobytes() == p1[k].data.tobytes() for k in live)
    ckpt_rt &= state.opt_state["t"] == state2.opt_state["t"]
    ckpt_rt &= all(state.opt_state[m][k].tobytes() == state2.opt_state[m][k].tobytes()
                   for m in ("m", "v") for k in state.opt_state[m])

    ok = same_run and resumed and data_rt and ckpt_rt
    criterion(10, ok, f"repeat run identical={same_run}, resume identical={resumed}, "
                      f"dataset round trip={data_rt}, checkpoint round trip={ckpt_rt}")
    assert ok


def test_c11_sgd_literal_step(criterion):
    errs = [st.sgd_literal_error(seed=s) for s in range(3)]
    ok = max(errs) < 1e-15
    criterion(11, ok, f"max |new - (param - beta*grad)| = {max(errs):.1e} over 3 seeds")
    assert ok
