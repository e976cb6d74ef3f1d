import numpy as np
import pytest

from seggan.data import ShapesConfig, gen_shapes_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_dataset():
    """20 tiny images shared by trainer and CLI tests."""
    return gen_shapes_dataset(ShapesConfig(num_samples=20, image_size=32, seed=0))
