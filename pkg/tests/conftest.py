import numpy as np
import pytest
from hypothesis import settings

from srsim.field import BoundaryPartition, Grid
from srsim.galerkin import GalerkinModel, RunConfig
from srsim.mimetic import MimeticComplex

settings.register_profile("srsim", deadline=None, max_examples=40)
settings.load_profile("srsim")


@pytest.fixture(scope="session")
def grid12():
    return Grid((12, 12, 12))


@pytest.fixture(scope="session")
def bc12(grid12):
    return BoundaryPartition(grid12)


@pytest.fixture(scope="session")
def cx12(grid12, bc12):
    return MimeticComplex(grid12, bc12)


@pytest.fixture(scope="session")
def model12():
    return GalerkinModel(RunConfig(t_end=0.2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
