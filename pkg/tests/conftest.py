import numpy as np
import pytest

from acsharp.reaction import cubic, steep


@pytest.fixture(scope="session")
def f_cubic():
    return cubic(3.0)


@pytest.fixture(scope="session")
def f_steep():
    return steep(3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
