import numpy as np
import pytest

from stnas import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
