"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Prints best-of-N microseconds per call for each kernel and shape, the
speedup of the compiled backend, and the max abs difference between the two
backends' outputs. Also times one meta-training step of the benchmark net
with each backend.
"""

import argparse
import json
import time
import timeit

import numpy as np

from metadg import _kernels_py, kernels

SHAPES = [
    # (batch, in_ch, size, out_ch, stride)
    (20, 3, 16, 4, 1),
    (20, 4, 8, 8, 1),
    (20, 8, 4, 8, 1),
    (20, 3, 32, 32, 1),
    (20, 32, 16, 64, 1),
    (8, 16, 16, 16, 2),
]


def _cases(rng, B, C, H, O, s):
    x = rng.normal(size=(B, C, H, H))
    w = rng.normal(size=(O, C, 3, 3))
    y = _kernels_py.conv2d_forward(x, w, s, 1)
    g = rng.normal(size=y.shape)
    xp = rng.normal(size=(B, O, H, H))
    _, idx = _kernels_py.maxpool2_forward(xp)
    gp = rng.normal(size=idx.shape)
    scale, shift = rng.normal(size=O), rng.normal(size=O)
    _, xhat, inv = _kernels_py.standardize_forward(xp, scale, shift, 1e-5)
    return {
        "conv2d_forward": (x, w, s, 1),
        "conv2d_backward_input": (g, w, x.shape, s, 1),
        "conv2d_backward_weight": (x, g, w.shape, s, 1),
        "maxpool2_forward": (xp,),
        "pool_scatter": (gp, idx, xp.shape),
        "standardize_forward": (xp, scale, shift, 1e-5),
        "standardize_backward": (xp, xhat, inv, scale),
    }


def _first(r):
    return r[0] if isinstance(r, tuple) else r


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    comp = kernels.compiled_backend
    rows = []
    for shape in SHAPES:
        for name, args in _cases(rng, *shape).items():
            fp = getattr(_kernels_py, name)
            n = max(1, int(2000 / (1 + np.prod(shape[:4]) / 2000)))
            tp = min(timeit.repeat(lambda: fp(*args), number=n, repeat=repeat)) / n
            row = {"kernel": name, "shape": list(shape), "python_us": tp * 1e6}
            if comp is not None:
                fc = getattr(comp, name)
                tc = min(timeit.repeat(lambda: fc(*args), number=n, repeat=repeat)) / n
                diff = float(np.max(np.abs(_first(fc(*args)) - _first(fp(*args)))))
                row.update(compiled_us=tc * 1e6, speedup=tp / tc, max_abs_diff=diff)
            rows.append(row)
    return rows


def bench_step(iters=20):
    from metadg import cli, metalearn as ml
    run = cli.resolve({}, cli.BENCHMARK)
    domains = cli.load_domains(run)[:3]
    net_cfg = cli.net_config(run, domains[0].x.shape[1:])
    cfg = cli.meta_config(run)
    out = {}
    for backend in ("python", "compiled"):
        if backend == "compiled" and kernels.compiled_backend is None:
            continue
        prev = kernels.use_backend(backend)
        state = ml.init_state(net_cfg, cfg)
        state, _ = ml.meta_step(state, domains, cfg, net_cfg)
        t0 = time.perf_counter()
        ml.train(cfg, net_cfg, domains, state=state, iters=iters)
        out[backend] = (time.perf_counter() - t0) / iters * 1e3
        kernels.use_backend(prev)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args()
    rows = bench_kernels(args.repeat)
    print(f"{'kernel':<24} {'shape':<22} {'python us':>10} {'compiled us':>12} {'speedup':>8} {'max diff':>9}")
    for r in rows:
        shape = "x".join(str(v) for v in r["shape"])
        if "compiled_us" in r:
            print(f"{r['kernel']:<24} {shape:<22} {r['python_us']:>10.1f} {r['compiled_us']:>12.1f} "
                  f"{r['speedup']:>7.2f}x {r['max_abs_diff']:>9.1e}")
        else:
            print(f"{r['kernel']:<24} {shape:<22} {r['python_us']:>10.1f} {'n/a':>12}")
    step = bench_step()
    for k, v in step.items():
        print(f"meta step ({k} kernels): {v:.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "meta_step_ms": step}, fh, indent=2)


if __name__ == "__main__":
    main()
