import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metassm import autodiff as ad

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def fd_grad(f, x, h=1e-6):
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def flat_fd_check(loss_of_flat, flat, grad, idx, h=1e-6):
    """Worst relative error of ``grad[idx]`` against central differences."""
    worst = 0.0
    for i in idx:
        e = np.zeros_like(flat)
        e[i] = h
        fd = (loss_of_flat(flat + e) - loss_of_flat(flat - e)) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), 1e-6))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def scalar(x):
    return float(np.asarray(ad.value_of(x)))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
