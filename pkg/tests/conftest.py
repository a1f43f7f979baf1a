import numpy as np
import pytest

from msvmamba.gradcheck import check_gradients
from msvmamba.tensor import parameter, precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def rand_param(rng, *shape, lo=-1.0, hi=1.0):
    return parameter(rng.uniform(lo, hi, shape))


def worst(fn, inputs, **kw):
    return max(check_gradients(fn, inputs, **kw).values())


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
