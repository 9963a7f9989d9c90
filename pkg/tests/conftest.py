import numpy as np
import pytest


def central_diff(f, arrays, eps=1e-5):
    """Independent finite-difference oracle: d f / d arrays[k] entrywise."""
    grads = {}
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
        grads[k] = g
    return grads


def max_rel_err(a, b, floor=1e-8):
    """max |a - b| / max(|a|, |b|, floor), entrywise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
