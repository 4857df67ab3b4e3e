import numpy as np
import pytest

from wdlab.model import Activation, Architecture, Dataset, Params
from wdlab.optimize import init_params


def random_net(rng, d=5, widths=(4, 3), kind="relu", H=1, scale=1.0):
    arch = Architecture(d, widths, Activation(kind, H))
    p = init_params(arch, "scaled_gaussian", int(rng.integers(2**31)), scale)
    return arch, p


def unit_rows(rng, n, d):
    X = rng.normal(size=(n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def random_data(rng, n, d):
    return Dataset(unit_rows(rng, n, d), rng.choice((-1.0, 1.0), size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sample_off_kink(rng, d, widths, kind, H, n, margin=1e-3, scale=0.7):
    """Redraw (theta, X) until every pre-activation is at least ``margin`` from 0."""
    from wdlab.model import min_abs_preactivation

    while True:
        arch, p = random_net(rng, d, widths, kind, H, scale)
        data = random_data(rng, n, d)
        if kind == "identity" or min_abs_preactivation(p, arch, data.X) > margin:
            return arch, p, data


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
