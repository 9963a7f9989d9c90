"""Compiled kernels against the numpy fallback, and backend selection."""

import os
import subprocess
import sys

import numpy as np
import pytest

from metadg import _kernels_py as py
from metadg import kernels

compiled = kernels.compiled_backend
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")

CONV_CASES = [
    ((2, 3, 8, 8), (4, 3, 3, 3), 1, 1),
    ((3, 2, 7, 5), (5, 2, 3, 3), 2, 1),
    ((1, 4, 6, 6), (2, 4, 3, 3), 1, 0),
    ((2, 1, 4, 4), (1, 1, 1, 1), 1, 0),
    ((20, 8, 4, 4), (8, 8, 3, 3), 1, 1),
]


@needs_compiled
@pytest.mark.parametrize("xs,ws,stride,pad", CONV_CASES)
def test_conv_kernels_agree(rng, xs, ws, stride, pad):
    x = rng.normal(size=xs)
    w = rng.normal(size=ws)
    out = py.conv2d_forward(x, w, stride, pad)
    np.testing.assert_allclose(compiled.conv2d_forward(x, w, stride, pad), out, rtol=1e-12, atol=1e-12)
    g = rng.normal(size=out.shape)
    np.testing.assert_allclose(compiled.conv2d_backward_input(g, w, xs, stride, pad),
                               py.conv2d_backward_input(g, w, xs, stride, pad), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(compiled.conv2d_backward_weight(x, g, ws, stride, pad),
                               py.conv2d_backward_weight(x, g, ws, stride, pad), rtol=1e-12, atol=1e-12)


@needs_compiled
def test_pool_kernels_agree(rng):
    x = rng.normal(size=(3, 4, 6, 8))
    out_c, idx_c = compiled.maxpool2_forward(x)
    out_p, idx_p = py.maxpool2_forward(x)
    np.testing.assert_array_equal(out_c, out_p)
    np.testing.assert_array_equal(np.asarray(idx_c), np.asarray(idx_p))
    g = rng.normal(size=out_p.shape)
    np.testing.assert_array_equal(compiled.pool_scatter(g, idx_c, x.shape), py.pool_scatter(g, idx_p, x.shape))
    y = rng.normal(size=x.shape)
    np.testing.assert_array_equal(compiled.pool_gather(y, idx_c), py.pool_gather(y, idx_p))


@needs_compiled
@pytest.mark.parametrize("shape", [(6, 3, 4, 4), (5, 7)])
def test_standardize_kernels_agree(rng, shape):
    x = rng.normal(1.0, 2.0, size=shape)
    s = rng.normal(size=shape[1])
    b = rng.normal(size=shape[1])
    fc = compiled.standardize_forward(x, s, b, 1e-5)
    fp = py.standardize_forward(x, s, b, 1e-5)
    for a, c in zip(fc, fp):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)
    g = rng.normal(size=shape)
    for a, c in zip(compiled.standardize_backward(g, fp[1], fp[2], s), py.standardize_backward(g, fp[1], fp[2], s)):
        np.testing.assert_allclose(a, c, rtol=1e-11, atol=1e-12)


@needs_compiled
def test_kernels_accept_readonly_inputs(rng):
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    x.flags.writeable = False
    w.flags.writeable = False
    compiled.conv2d_forward(x, w, 1, 1)
    compiled.maxpool2_forward(x)


def test_python_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 5))
    for i in range(5):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", xp[:, :, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(py.conv2d_forward(x, w, 1, 1), ref, atol=1e-12)


def test_use_backend_switch():
    prev = kernels.backend_name()
    try:
        assert kernels.use_backend("python") == prev
        assert kernels.backend_name() == "python"
        with pytest.raises(ValueError):
            kernels.use_backend("gpu")
    finally:
        if prev == "compiled":
            kernels.use_backend("compiled")
    assert kernels.backend_name() == prev


def test_env_forces_fallback():
    env = dict(os.environ, METADG_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from metadg import kernels; print(kernels.backend_name())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_training_identical_across_backends():
    """A few meta steps give the same parameters (to rounding) on either backend."""
    from metadg import metalearn as ml
    from metadg.selftest import micro_problem

    results = {}
    prev = kernels.backend_name()
    try:
        for name in ("compiled", "python"):
            kernels.use_backend(name)
            net_cfg, params, mb, cfg = micro_problem(seed=2)
            results[name] = ml.meta_grads(params, mb, cfg, net_cfg).all().flat()
    finally:
        kernels.use_backend(prev)
    np.testing.assert_allclose(results["compiled"], results["python"], rtol=1e-9, atol=1e-12)
