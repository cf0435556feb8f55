import numpy as np
import pytest

from splitmc import ArrheniusRates, DenseGenerator
from splitmc.lattice import checkerboard, split_generators

THREE_STATE_Q = np.array([[-3.0, 1.0, 2.0],
                          [3.0, -4.0, 1.0],
                          [1.0, 0.0, -1.0]])
THREE_STATE_A = np.array([[-3.0, 1.0, 2.0],
                          [3.0, -4.0, 1.0],
                          [0.0, 0.0, 0.0]])


@pytest.fixture
def three_state():
    L = DenseGenerator(THREE_STATE_Q)
    L1 = DenseGenerator(THREE_STATE_A)
    return L, L1, L - L1


@pytest.fixture(scope="session")
def ring4():
    dims = (4,)
    params = ArrheniusRates()
    dec = checkerboard(dims, 2)
    return dims, params, dec, split_generators(dims, params, dec)


@pytest.fixture(scope="session")
def ring6():
    dims = (6,)
    params = ArrheniusRates()
    dec = checkerboard(dims, 3)
    return dims, params, dec, split_generators(dims, params, dec)


def random_generator(rng, n, density=1.0, low=0.2, high=2.0):
    R = rng.uniform(low, high, (n, n)) * (rng.random((n, n)) < density)
    np.fill_diagonal(R, 0.0)
    R -= np.diag(R.sum(axis=1))
    return R
