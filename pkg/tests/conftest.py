import numpy as np
import pytest

from dal.data import SyntheticConfig, generate_synthetic_truth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_truth():
    cfg = SyntheticConfig(identities=8, cameras=2, frames_per_tracklet=(3, 5), base_dim=8, seed=7)
    return generate_synthetic_truth(cfg)


@pytest.fixture(scope="session")
def small_dataset(small_truth):
    return small_truth.dataset
