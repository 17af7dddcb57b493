import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _no_debug_leak():
    # Tests that flip the debug numeric checks must not leak into others.
    from rmiseg import tensor as T

    yield
    T.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
