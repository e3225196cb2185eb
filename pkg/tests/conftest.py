import numpy as np
import pytest

from heatflux_eks.physics import Mesh, PhysicalParams

SMALL_MESH = Mesh(nx=5, ny=8, dx=0.2, dy=0.0125, dt=0.01)


@pytest.fixture
def params():
    return PhysicalParams()


@pytest.fixture
def mesh():
    return Mesh()


@pytest.fixture
def small_mesh():
    return SMALL_MESH


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def baseline_networks():
    """Transfer and sensitivity networks for the baseline sensor.

    Trained once and kept in the surrogate cache (``$HEATFLUX_EKS_CACHE``,
    default ``~/.cache/heatflux_eks``); the first run takes a few minutes.
    """
    from heatflux_eks.surrogates import SurrogateSpec, load_or_train

    return load_or_train(SurrogateSpec(sensor=(20, 44)))
