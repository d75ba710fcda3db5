import numpy as np
import pytest

from genrec.model import Recommender, model_config_for
from genrec.world import WorldConfig, generate_dataset

SMALL_WORLD = dict(vocab_size=120, n_users=60, b_pool_size=40, b_cluster_size=8)


@pytest.fixture(scope="session")
def small_world():
    """(train, validation) on a world small enough to build in well under a second."""
    return generate_dataset(WorldConfig(**SMALL_WORLD), 11)


@pytest.fixture(scope="session")
def tiny_cfg(small_world):
    train, _ = small_world
    return model_config_for(train.catalog, d=16, layers=1, heads=2, seq_len=8, precision="f64")


@pytest.fixture
def tiny_model(small_world, tiny_cfg):
    return Recommender.create(tiny_cfg, small_world[0].catalog, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
