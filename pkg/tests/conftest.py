import numpy as np
import pytest
from hypothesis import settings

from nctrl import datagen

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = datagen.GenConfig(n=3, n_regimes=3, T=600, seed=7)
    return datagen.generate(cfg)
