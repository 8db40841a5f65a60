import numpy as np
import pytest

from smoothnet import MlpNetwork, init_network


def central_diff(f, v, h=1e-6):
    """Central finite differences of scalar ``f`` at every entry of array ``v``."""
    v = np.array(v, dtype=np.float64)
    out = np.empty_like(v)
    flat, g = v.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(v)
        flat[i] = old - h
        down = f(v)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return out


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_distributions(rng, n, k):
    p = rng.random((n, k)) ** 3
    return p / p.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    net = init_network((2, 5, 3), seed=3)
    net.params[:] += 0.05 * np.random.default_rng(9).standard_normal(net.param_count)
    return net


# Lines recorded by the acceptance tests, echoed after the run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
