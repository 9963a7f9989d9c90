"""Command-line entry points: synth, train, eval, ablate, selftest.

Run configs are flat JSON objects. Unknown keys are rejected. Recognised keys:

    variant, alpha, beta, batch_per_domain, iters, optimizer, depth_weight,
    seed, adam_b1, adam_b2, adam_eps       training (MetaConfig)
    preset, widths, meta_width, depth_width network (NetConfig; the input
                                            shape comes from the data)
    data                                    dataset directory written by synth
    synth                                   inline synthetic spec (see below)
    leave_out                               held-out target domain name
    out                                     output directory
    checkpoint_every                        iterations between checkpoints
    val_fraction                            source samples kept for threshold
                                            selection
    eval_batch                              scoring batch size
    seeds, variants, leave_outs             ablation grid

A synth spec is either ``{"n_per_class", "image_size", "depth_size",
"seed"}`` (the default four domains) or ``{"domains": [DomainSpec, ...]}``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np

from . import datagen, metalearn as ml, metrics
from .nets import NetConfig

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

META_KEYS = tuple(f.name for f in fields(ml.MetaConfig))
NET_KEYS = ("preset", "widths", "meta_width", "depth_width")
RUN_KEYS = ("data", "synth", "leave_out", "out", "checkpoint_every", "val_fraction", "eval_batch",
            "seeds", "variants", "leave_outs")
SYNTH_KEYS = ("n_per_class", "image_size", "depth_size", "seed", "domains")

# The desk-scale benchmark used by ablate when no config is given.
BENCHMARK = {
    "synth": {"n_per_class": 100, "image_size": 16, "depth_size": 4, "seed": 0},
    "widths": [4, 8],
    "meta_width": 8,
    "depth_width": 8,
    "alpha": 3.0,
    "beta": 1e-3,
    "batch_per_domain": 20,
    "iters": 2000,
    "optimizer": "adam",
    "checkpoint_every": 500,
    "val_fraction": 0.1,
    "eval_batch": 64,
    "seeds": 10,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def check_keys(cfg, allowed, where="config"):
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def resolve(cfg, base=None):
    """Merge ``cfg`` over ``base`` and validate every key."""
    check_keys(cfg, META_KEYS + NET_KEYS + RUN_KEYS)
    out = dict(base or {})
    out.update(cfg)
    if "synth" in out and out["synth"] is not None:
        if not isinstance(out["synth"], dict):
            raise ConfigError("synth must be an object")
        check_keys(out["synth"], SYNTH_KEYS, "synth")
    return out


def meta_config(run, **override):
    kw = {k: run[k] for k in META_KEYS if k in run}
    kw.update(override)
    try:
        return ml.MetaConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def net_config(run, input_shape):
    kw = {k: run[k] for k in NET_KEYS if k in run}
    if kw.get("preset", "desk") == "paper":
        return NetConfig.paper()
    try:
        return NetConfig(input_shape=tuple(input_shape), **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def synth_specs(spec):
    spec = dict(spec or {})
    check_keys(spec, SYNTH_KEYS, "synth")
    if "domains" in spec:
        try:
            return [datagen.DomainSpec(**d) for d in spec["domains"]]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth.domains: {exc}") from None
    kw = {k: spec[k] for k in ("n_per_class", "image_size", "depth_size", "seed") if k in spec}
    try:
        return datagen.default_specs(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None


def load_domains(run):
    if run.get("data"):
        return datagen.load_dataset(run["data"])
    return datagen.synth_domains(synth_specs(run.get("synth")))


def dataset_digest(domains):
    h = hashlib.sha256()
    for d in domains:
        h.update(d.name.encode())
        h.update(np.ascontiguousarray(d.x, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(d.y, dtype="u1").tobytes())
        h.update(np.ascontiguousarray(d.depth, dtype="<f4").tobytes())
    return h.hexdigest()


def split_sources(domains, leave_out, val_fraction, seed):
    """(train_domains, val_domains, target): a stratified ``val_fraction`` of
    every source domain is held back for threshold selection."""
    names = [d.name for d in domains]
    if leave_out not in names:
        raise ConfigError(f"leave_out {leave_out!r} is not one of {names}")
    target = domains[names.index(leave_out)]
    rng = np.random.default_rng([int(seed), 7919])
    train, val = [], []
    for d in domains:
        if d.name == leave_out:
            continue
        if val_fraction <= 0:
            train.append(d)
            continue
        keep, hold = [], []
        for cls in (1, 0):
            idx = rng.permutation(np.flatnonzero(d.y == cls))
            n_val = max(1, int(round(val_fraction * len(idx))))
            hold.append(idx[:n_val])
            keep.append(idx[n_val:])
        train.append(d.subset(np.sort(np.concatenate(keep))))
        val.append(d.subset(np.sort(np.concatenate(hold))))
    return train, val, target


# ---------------------------------------------------------------------------
# runs

HISTORY_FIELDS = ("iter", "objective", "cls_train", "dep_train", "cls_test", "dep_test", "val_index",
                  "inner_updates")


def _history_row(stats):
    def total(v):
        if v is None:
            return ""
        if isinstance(v, list):
            return repr(float(np.sum(v))) if v else ""
        return repr(float(v))
    return [stats["iter"], repr(stats["objective"]), total(stats["cls_train"]), total(stats["dep_train"]),
            total(stats["cls_test"]), total(stats["dep_test"]), stats["val_index"], stats["inner_updates"]]


def run_training(run, domains, out=None, log=None, resume=None):
    """Train one cell on every domain except ``leave_out``.

    Returns a dict with the final state, the validation threshold, the
    held-out metrics report and the loss history.
    """
    leave_out = run.get("leave_out") or domains[-1].name
    cfg = meta_config(run)
    train_d, val_d, target = split_sources(domains, leave_out, run.get("val_fraction", 0.1), cfg.seed)
    net_cfg = net_config(run, domains[0].x.shape[1:])
    if net_cfg.depth_map_size != tuple(domains[0].depth.shape[1:]):
        raise ConfigError(f"depth maps are {domains[0].depth.shape[1:]}, network produces {net_cfg.depth_map_size}")
    every = int(run.get("checkpoint_every", 500))

    state = None
    if resume is not None:
        state, _ = ml.load_checkpoint(resume)
    if state is None:
        state = ml.init_state(net_cfg, cfg)
    history = []
    hist_fh = writer = None
    if out is not None:
        os.makedirs(out, exist_ok=True)
        echo = dict(run, leave_out=leave_out)
        echo.pop("out", None)
        with open(os.path.join(out, "config.json"), "w") as fh:
            json.dump(echo, fh, indent=2, sort_keys=True)
            fh.write("\n")
        hist_fh = open(os.path.join(out, "loss_history.csv"), "a" if resume else "w", newline="")
        writer = csv.writer(hist_fh)
        if not resume:
            writer.writerow(HISTORY_FIELDS)
    extra = {"leave_out": leave_out, "sources": [d.name for d in train_d]}
    t0 = time.time()
    try:
        while state.iter < cfg.iters:
            state, stats = ml.meta_step(state, train_d, cfg, net_cfg)
            stats["iter"] = state.iter
            history.append(stats)
            if writer is not None:
                writer.writerow(_history_row(stats))
            if log is not None and (state.iter % max(1, cfg.iters // 10) == 0 or state.iter == cfg.iters):
                log(f"iter {state.iter}/{cfg.iters} objective {stats['objective']:.4f} "
                    f"({time.time() - t0:.1f}s)")
            if out is not None and every > 0 and state.iter % every == 0 and state.iter < cfg.iters:
                ml.save_checkpoint(state, os.path.join(out, "checkpoints", f"iter_{state.iter:06d}"),
                                   cfg, net_cfg, extra)
    finally:
        if hist_fh is not None:
            hist_fh.close()

    eval_batch = int(run.get("eval_batch", 64))
    threshold = None
    if val_d:
        vx = np.concatenate([d.x for d in val_d])
        vy = np.concatenate([d.y for d in val_d])
        threshold = metrics.eer_threshold(metrics.score(state.params, vx, net_cfg, eval_batch), vy)
    scores = metrics.score(state.params, target.x, net_cfg, eval_batch)
    report = metrics.evaluate(scores, threshold, target.y)
    extra["threshold"] = threshold
    if out is not None:
        ml.save_checkpoint(state, os.path.join(out, "checkpoint"), cfg, net_cfg, extra)
        metrics.write_report(report, out)
    return {"state": state, "threshold": threshold, "report": report, "history": history,
            "leave_out": leave_out, "net_cfg": net_cfg, "cfg": cfg}


# ---------------------------------------------------------------------------
# commands


def _print(msg):
    print(msg, flush=True)


def cmd_synth(args):
    run = resolve(load_config(args.config)) if args.config else {}
    if args.config:
        check_keys(run, ("synth", "out"))
    out = args.out or run.get("out")
    if not out:
        raise ConfigError("synth needs --out (or an 'out' key)")
    domains = datagen.synth_domains(synth_specs(run.get("synth")))
    datagen.save_dataset(domains, out)
    for d in domains:
        _print(f"{d.name}: {len(d)} samples ({int(np.sum(d.y))} real, {int(np.sum(d.y == 0))} fake), "
               f"input {tuple(d.x.shape[1:])}, depth {tuple(d.depth.shape[1:])}")
    _print(f"wrote {len(domains)} domains to {out}")
    return EXIT_OK


def _train_config(args):
    run = resolve(load_config(args.config)) if args.config else resolve({}, BENCHMARK)
    if args.domain:
        run["leave_out"] = args.domain
    if args.out:
        run["out"] = args.out
    if not run.get("out"):
        raise ConfigError("train needs --out (or an 'out' key)")
    return run


def cmd_train(args):
    run = _train_config(args)
    domains = load_domains(run)
    res = run_training(run, domains, out=run["out"], log=_print, resume=args.checkpoint)
    r = res["report"]
    _print(f"held-out {res['leave_out']}: HTER {r.hter:.4f} (oracle {r.hter_oracle:.4f}) AUC {r.auc:.4f}")
    return EXIT_OK


def cmd_eval(args):
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    state, meta = ml.load_checkpoint(args.checkpoint)
    run = resolve(load_config(args.config)) if args.config else {}
    data = args.data or run.get("data")
    domains = datagen.load_dataset(data) if data else datagen.synth_domains(synth_specs(run.get("synth")))
    name = args.domain or meta.get("leave_out")
    names = [d.name for d in domains]
    if name not in names:
        raise ConfigError(f"domain {name!r} is not one of {names}")
    dom = domains[names.index(name)]
    net_cfg = NetConfig.from_dict(meta["net_config"])
    if tuple(dom.x.shape[1:]) != net_cfg.input_shape:
        raise ConfigError(f"checkpoint expects inputs {net_cfg.input_shape}, domain {name} has {dom.x.shape[1:]}")
    scores = metrics.score(state.params, dom.x, net_cfg, int(run.get("eval_batch", 64)))
    report = metrics.evaluate(scores, meta.get("threshold"), dom.y)
    out = args.out or os.path.join(args.checkpoint, f"eval_{name}")
    metrics.write_report(report, out)
    if args.attention:
        adir = os.path.join(out, "attention")
        os.makedirs(adir, exist_ok=True)
        for i in range(len(dom)):
            cam = metrics.attention_map(state.params, dom.x[i], net_cfg)
            metrics.write_pgm(os.path.join(adir, f"{i:04d}_y{int(dom.y[i])}.pgm"), cam)
    _print(f"{name}: HTER {report.hter:.4f} (oracle {report.hter_oracle:.4f}) AUC {report.auc:.4f} "
           f"-> {out}")
    return EXIT_OK


def _cell(job):
    run, variant, seed, leave_out = job
    cell_run = dict(run, variant=variant, seed=seed, leave_out=leave_out)
    domains = load_domains(cell_run)
    t0 = time.time()
    res = run_training(cell_run, domains)
    r = res["report"]
    return {"variant": variant, "seed": seed, "leave_out": leave_out, "hter": r.hter,
            "hter_oracle": r.hter_oracle, "auc": r.auc, "threshold": res["threshold"],
            "inner_updates": int(sum(h["inner_updates"] for h in res["history"])),
            "data_sha256": dataset_digest(domains), "seconds": time.time() - t0}


def threads():
    v = os.environ.get("METADG_THREADS")
    if v:
        try:
            n = int(v)
        except ValueError:
            raise ConfigError(f"METADG_THREADS must be an integer, got {v!r}") from None
        if n < 1:
            raise ConfigError("METADG_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def summarize(cells):
    """One row per (variant, leave_out) plus an ``all`` row per variant."""
    rows = []
    variants = sorted({c["variant"] for c in cells}, key=lambda v: ml.VARIANTS.index(v))
    outs = sorted({c["leave_out"] for c in cells})
    for v in variants:
        for lo in outs + ["all"]:
            sel = [c for c in cells if c["variant"] == v and (lo == "all" or c["leave_out"] == lo)]
            if not sel:
                continue
            h = np.array([c["hter"] for c in sel])
            a = np.array([c["auc"] for c in sel])
            ho = np.array([c["hter_oracle"] for c in sel])
            rows.append({"variant": v, "leave_out": lo, "n": len(sel),
                         "hter_mean": h.mean(), "hter_std": h.std(ddof=1) if len(sel) > 1 else 0.0,
                         "auc_mean": a.mean(), "auc_std": a.std(ddof=1) if len(sel) > 1 else 0.0,
                         "hter_oracle_mean": ho.mean()})
    return rows


def run_ablation(run, out, log=None, n_workers=1):
    """Run every (leave_out, seed, variant) cell; completed cells in
    ``out/cells.jsonl`` are reused so an interrupted ablation can continue."""
    os.makedirs(out, exist_ok=True)
    domains = load_domains(run)
    names = [d.name for d in domains]
    leave_outs = run.get("leave_outs") or names
    variants = run.get("variants") or list(ml.VARIANTS)
    for v in variants:
        if v not in ml.VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    seeds = int(run.get("seeds", 1))
    if seeds < 1:
        raise ConfigError("seeds must be >= 1")
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
        fh.write("\n")
    cells_path = os.path.join(out, "cells.jsonl")
    done = {}
    if os.path.exists(cells_path):
        with open(cells_path) as fh:
            for line in fh:
                if line.strip():
                    c = json.loads(line)
                    done[(c["variant"], c["seed"], c["leave_out"])] = c
    base = {k: v for k, v in run.items() if k not in ("seeds", "variants", "leave_outs", "out")}
    jobs = [(base, v, s, lo) for lo in leave_outs for s in range(seeds) for v in variants
            if (v, s, lo) not in done]
    t0 = time.time()
    total = len(jobs) + len(done)

    def record(c):
        done[(c["variant"], c["seed"], c["leave_out"])] = c
        with open(cells_path, "a") as fh:
            fh.write(json.dumps(c) + "\n")
        if log is not None:
            log(f"[{len(done)}/{total}] {c['leave_out']} seed {c['seed']} {c['variant']}: "
                f"HTER {c['hter']:.4f} AUC {c['auc']:.4f} ({c['seconds']:.0f}s)")

    if n_workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(min(n_workers, len(jobs))) as pool:
            for c in pool.imap_unordered(_cell, jobs):
                record(c)
    else:
        for job in jobs:
            record(_cell(job))
    cells = [done[k] for k in sorted(done, key=lambda k: (k[2], k[1], ml.VARIANTS.index(k[0])))]
    digests = {c["data_sha256"] for c in cells}
    if len(digests) != 1:
        raise RuntimeError(f"cells saw different dataset bytes: {sorted(digests)}")
    rows = summarize(cells)
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow(r)
    summary = {"rows": rows, "n_cells": len(cells), "data_sha256": digests.pop(),
               "elapsed_seconds": time.time() - t0,
               "cell_seconds": float(np.sum([c["seconds"] for c in cells]))}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return cells, rows


def cmd_ablate(args):
    run = resolve(load_config(args.config), BENCHMARK) if args.config else resolve({}, BENCHMARK)
    if args.seeds is not None:
        run["seeds"] = args.seeds
    if args.domain:
        run["leave_outs"] = [args.domain]
    out = args.out or run.get("out")
    if not out:
        raise ConfigError("ablate needs --out (or an 'out' key)")
    _, rows = run_ablation(run, out, log=_print, n_workers=threads())
    _print(f"{'variant':<12} {'leave_out':<9} {'n':>3} {'HTER mean±std':>18} {'AUC mean±std':>18}")
    for r in rows:
        _print(f"{r['variant']:<12} {r['leave_out']:<9} {r['n']:>3} "
               f"{r['hter_mean']:>9.4f}±{r['hter_std']:<8.4f} {r['auc_mean']:>9.4f}±{r['auc_std']:<8.4f}")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_all
    results = run_all()
    width = max(len(r.name) for r in results)
    for r in results:
        _print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  value={r.value:.3e}  {r.tolerance}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        _print("failed: " + ", ".join(failed))
        return EXIT_FAIL
    _print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "selftest": cmd_selftest}


def build_parser():
    p = argparse.ArgumentParser(prog="metadg", description="Fine-grained meta-learning for domain generalization.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "selftest":
            continue
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out", help="output directory")
        if name in ("train", "eval"):
            sp.add_argument("--checkpoint", help="checkpoint directory (eval: model, train: resume from)")
        if name in ("train", "eval", "ablate"):
            sp.add_argument("--domain", help="held-out / evaluated domain name")
        if name == "eval":
            sp.add_argument("--data", help="dataset directory")
            sp.add_argument("--attention", action="store_true", help="write attention maps as PGM")
        if name == "ablate":
            sp.add_argument("--seeds", type=int, help="number of seeds per cell")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    n = os.environ.get("METADG_THREADS")
    try:
        if n is not None:
            threads()
        return COMMANDS[args.command](args)
    except (ConfigError, datagen.DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
