import math

import pytest

from hestonvi.model import HestonParams, MeasureWeights, Payoff

X0 = math.log(100.0)


@pytest.fixture(scope="session")
def bench():
    return HestonParams(kappa=2.0, theta=0.04, sigma=0.3, rho=-0.5, r=0.05, delta=0.0)


@pytest.fixture(scope="session")
def weights():
    return MeasureWeights(gamma=4.0, mu=2.0)


@pytest.fixture(scope="session")
def put():
    return Payoff.put(100.0)
