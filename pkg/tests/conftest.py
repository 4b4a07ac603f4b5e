import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from psnet.gradcheck import REDUCED
from psnet.model import init_params


@pytest.fixture(autouse=True, scope="session")
def sequential_blas():
    # one BLAS thread: bitwise-reproducible sums and no oversubscription
    with threadpool_limits(1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="module")
def reduced_params():
    return init_params(REDUCED, seed=3)


def random_images(rng, size=16):
    return rng.random((size, size, 3)), rng.random((size, size, 3))
