import numpy as np
import pytest

from seqmon.model import GaussianModel, HypothesisPair, preset_damping, preset_force


@pytest.fixture(scope="session")
def damping():
    return preset_damping()


@pytest.fixture(scope="session")
def force():
    return preset_force()


def scalar_model(a=-1.0, b=0.0, c=1.0, d=1.0):
    """Two-dimensional diagonal model, handy for hand-checkable cases."""
    return GaussianModel(A=a * np.eye(2), b=[b, 0.0], C=c * np.eye(2), D=d * np.eye(2), Gamma=np.zeros((2, 2)))


@pytest.fixture
def toy_pair():
    return HypothesisPair(scalar_model(a=-1.0), scalar_model(a=-3.0))
