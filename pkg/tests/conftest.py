"""
Pytest configuration and fixtures
"""

import numpy as np
import pytest

from hilbertforest import VectorDataset, set_num_threads
from hilbertforest.evaluate import synth_dataset


@pytest.fixture(autouse=True)
def default_threads():
    """Restore the default worker-pool size after every test."""
    yield
    set_num_threads(None)


@pytest.fixture
def rng():
    """Seeded generator for ad-hoc test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset():
    """400 clustered points in 16 dimensions."""
    return synth_dataset(400, 16, "gaussian-mixture", seed=7, clusters=8)


@pytest.fixture
def small_queries():
    """50 queries from the same distribution as ``small_dataset``."""
    ds = synth_dataset(450, 16, "gaussian-mixture", seed=7, clusters=8)
    return ds.take(range(400, 450))


@pytest.fixture
def tiny_dataset():
    """Five hand-placed 2-d points."""
    return VectorDataset(
        np.array(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]],
            dtype=np.float32,
        )
    )
