import os
import sys

# Add the parent directory to the Python path to import modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from geodesic_engine import manifold
from geodesic_engine.flow import FlowSettings


@pytest.fixture
def unit_disk():
    return manifold.disk(1.0)


@pytest.fixture
def unit_ball():
    return manifold.ball(1.0)


@pytest.fixture
def flat2():
    return manifold.euclidean(2)


@pytest.fixture
def focusing_lens():
    """Slow Gaussian lens at the origin; its geodesics focus inside the unit disk."""
    return manifold.gaussian_lens(2, amplitudes=(-0.5,), centers=[(0.0, 0.0)], widths=(0.25,))


@pytest.fixture
def sphere2():
    return manifold.sphere_patch(2)


@pytest.fixture
def settings():
    return FlowSettings(step=1.0 / 128.0)


@pytest.fixture
def coarse_settings():
    return FlowSettings(step=1.0 / 64.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
