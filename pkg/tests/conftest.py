import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mimn import tensor as T

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=15,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def rel_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def primitive_gradcheck(fn, *arrays, seed=0, step=1e-5):
    """Max relative error between analytic and central-difference gradients of
    sum(w * fn(*arrays)) for a fixed random w. Differences are taken in
    extended precision so roundoff does not dominate small entries."""
    leaves = [T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    w = np.random.default_rng(seed).normal(size=out.shape)
    T.backward(T.sum_all(T.mul(out, T.Tensor(w))))
    worst = 0.0
    wide = [np.asarray(a, dtype=np.longdouble) for a in arrays]
    w_wide = w.astype(np.longdouble)
    h = np.longdouble(step)

    def value():
        with T.no_grad():
            return (fn(*[T.Tensor(a) for a in wide]).data * w_wide).sum()

    for leaf, arr in zip(leaves, wide):
        flat = arr.reshape(-1)
        analytic = leaf.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            num = float((up - down) / (2 * h))
            worst = max(worst, float(rel_error(analytic[i], num)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance report ----------------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()
EXPECTED = pytest.StashKey[set]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}
    config.stash[EXPECTED] = set()


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            config.stash[EXPECTED].add(mark.args[0])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    expected = config.stash.get(EXPECTED, set())
    if not expected:
        return
    results = config.stash[ACCEPTANCE]
    terminalreporter.section("acceptance criteria")
    for n in sorted(expected):
        terminalreporter.write_line(results.get(n, f"FAIL  [{n:>2}] did not complete (error before verdict)"))


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(title: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  [{n:>2}] {title}" + (f": {detail}" if detail else "")
        request.config.stash[ACCEPTANCE][n] = line
        print(line)
        assert ok, line

    def skip(title: str, reason: str):
        request.config.stash[ACCEPTANCE][n] = f"SKIP  [{n:>2}] {title}: {reason}"
        pytest.skip(reason)

    record.skip = skip
    return record
