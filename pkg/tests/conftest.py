import numpy as np
import pytest

from cdilab.measure import LambdaMeasure
from cdilab.speed import build_speed_table


@pytest.fixture(scope="session")
def kingman():
    return LambdaMeasure.kingman()


@pytest.fixture(scope="session")
def beta15():
    return LambdaMeasure.beta(1.5)


@pytest.fixture(scope="session")
def kingman_table(kingman):
    return build_speed_table(kingman, 1e-4, 1.0, 64)


@pytest.fixture(scope="session")
def beta15_table(beta15):
    return build_speed_table(beta15, 1e-4, 1.0, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
