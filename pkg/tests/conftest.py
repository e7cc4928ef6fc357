import numpy as np
import pytest

from mmlstm.numeric import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def assert_bitwise(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    assert a.tobytes() == b.tobytes()
