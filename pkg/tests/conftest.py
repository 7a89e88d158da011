import numpy as np
import pytest

from slitspectra.geometry import DomainSpec, SlitGeometry
from slitspectra.meshgen import SizeField, mesh_limiting, mesh_perturbed


@pytest.fixture(scope="session")
def geom():
    return SlitGeometry()


@pytest.fixture(scope="session")
def domain():
    return DomainSpec()


@pytest.fixture(scope="session")
def coarse_size():
    return SizeField(h_max=0.3, grading=0.5, boundary_segments=48)


@pytest.fixture(scope="session")
def coarse_limiting(domain, geom, coarse_size):
    return mesh_limiting(domain, geom, coarse_size)


@pytest.fixture(scope="session")
def coarse_perturbed(domain, geom, coarse_size):
    return mesh_perturbed(domain, geom, 0.08, coarse_size)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
