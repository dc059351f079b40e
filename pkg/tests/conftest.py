import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from escape_pose.pose import H36M17


def random_pose(rng, spread=300.0):
    pose = rng.normal(0.0, spread, size=(17, 3))
    return pose - pose[0]


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(2**31)).as_matrix()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schema():
    return H36M17
