import numpy as np
import pytest

from offdiff.problem import GenConfig, generate_instance


@pytest.fixture(scope="session")
def default_cfg():
    return GenConfig()


@pytest.fixture(scope="session")
def small_instances(default_cfg):
    """A reusable pool of random 3-server 6-user instances."""
    return [generate_instance(default_cfg, seed) for seed in range(20)]


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
