import numpy as np
import pytest
from hypothesis import settings

from targetcorr.kernels import RBF
from targetcorr.tasks import Gp1d, TaskConfig, gen_gp1d, gen_random_feature_map

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def gp_task():
    train, test, curve = gen_gp1d(Gp1d(), seed=0)
    return train, test, curve


@pytest.fixture(scope="session")
def tanh_kernel():
    return gen_random_feature_map(100, 1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_inputs(rng, n, d_x=3, d_y=2, scale=1.0):
    X = scale * rng.standard_normal((d_x, n))
    Y = rng.standard_normal((d_y, n))
    return X, Y


@pytest.fixture
def smooth_rbf():
    """A well-conditioned kernel for random 3-D inputs."""
    return RBF(bandwidth=1.0)
