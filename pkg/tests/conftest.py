import numpy as np
import pytest

from wvo.objective import MultiLevelContext, SingleLevelContext


def random_single_ctx(rng, S=20, N=5, budget=None):
    L = rng.normal(-1.0, 1.0, size=(S, N))
    base = rng.normal(-3.0, 1.0, size=S)
    return SingleLevelContext(L, base, budget or float(N))


def random_multi_ctx(rng, S=20, K=3, M=4, budget=None):
    Lz = rng.normal(-1.0, 1.0, size=(S, K, M))
    base = rng.normal(-3.0, 1.0, size=S)
    return MultiLevelContext(Lz, base, budget or float(K))


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# One summary line per acceptance criterion, filled in by test_acceptance.py.
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA, key=lambda k: (int(k.rstrip("ab")), k)):
            terminalreporter.write_line(CRITERIA[key])
