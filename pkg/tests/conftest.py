import numpy as np
import pytest

from src.model import init_params
from tests.helpers import make_pair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_pair(rng):
    return make_pair(rng, 8, 8)


@pytest.fixture
def tiny_params():
    """C=4 keeps gradient checks and training runs fast."""
    return init_params(seed=3, channels=4)
