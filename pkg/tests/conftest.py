import numpy as np
import pytest

from sphereflow.geometry import (GridSpec, SphereSurface, build_cube_band,
                                 build_narrow_band)


@pytest.fixture(scope="session")
def sphere():
    return SphereSurface(radius=0.35, center=np.array([0.5, 0.5, 0.5]))


@pytest.fixture(scope="session")
def band15(sphere):
    return build_narrow_band(GridSpec(resolution=15), sphere, 3.0)


@pytest.fixture(scope="session")
def band21(sphere):
    return build_narrow_band(GridSpec(resolution=21), sphere, 3.0)


@pytest.fixture(scope="session")
def cube11():
    return build_cube_band(GridSpec(resolution=11))


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
