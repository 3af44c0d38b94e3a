import numpy as np
import pytest

from lfqgen import autodiff as ad


@pytest.fixture(autouse=True)
def _clean_nonfinite_flag():
    ad.reset_nonfinite()
    yield
    ad.reset_nonfinite()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
