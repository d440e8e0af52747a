"""Shared small-scale path bundles so the suite stays fast."""

import numpy as np
import pytest

from bsdelab.bsde import RegressionBasis
from bsdelab.fixtures import config_for_fixture
from bsdelab.forward import simulate


@pytest.fixture(scope="session")
def bm_config():
    # additive model: X = W, 50 steps on [0, 1]
    return config_for_fixture("additive-linear", n_paths=4000, steps=50, seed=99)


@pytest.fixture(scope="session")
def bm_paths(bm_config):
    return simulate(bm_config)


@pytest.fixture(scope="session")
def basis3():
    return RegressionBasis(1, 3)


def rel_l2(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean((a - b) ** 2)) / (np.sqrt(np.mean(b ** 2)) + floor))
