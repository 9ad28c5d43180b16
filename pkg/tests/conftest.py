import numpy as np
import pytest

from momest.expfam import FeatureMap


@pytest.fixture
def binary_pair_model() -> FeatureMap:
    """Two binary features over four outcomes: columns (0,0),(0,1),(1,0),(1,1)."""
    return FeatureMap.binary_cube(2)


@pytest.fixture
def ramp_model() -> FeatureMap:
    """One-dimensional family with feature values (5, -1, 0)."""
    return FeatureMap(np.array([[5.0, -1.0, 0.0]]))
