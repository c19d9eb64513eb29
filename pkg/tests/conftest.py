import numpy as np
import pytest

from lmcat import tensor as T


@pytest.fixture(autouse=True)
def finite_checks():
    prev = T.set_finite_checks(True)
    yield
    T.set_finite_checks(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
