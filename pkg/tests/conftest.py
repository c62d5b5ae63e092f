import numpy as np
import pytest

from hamgnn import graphdata as gd


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def sbm_dataset():
    return gd.synth_dataset("sbm", sizes=(20, 20), p_in=0.5, p_out=0.01, seed=0)


@pytest.fixture
def path3_dataset():
    return gd.GraphDataset("path3", np.array([[1.0], [2.0], [3.0]]),
                           np.zeros(3, dtype=int), [(0, 1), (1, 2)],
                           [0], [1], [2])


@pytest.fixture
def c4_dataset():
    return gd.GraphDataset("c4", np.eye(4), np.zeros(4, dtype=int),
                           [(0, 1), (1, 2), (2, 3), (0, 3)], [0], [1], [2])
