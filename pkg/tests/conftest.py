import numpy as np
import pytest
import torch
from hypothesis import settings

from tdlab.synth_world import GeneratorConfig, generate_dataset

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(GeneratorConfig(n_train=140, n_val=28, n_test=70, shortcut_strength=0.8), seed=3)


@pytest.fixture(scope="session")
def clean_ds():
    return generate_dataset(GeneratorConfig(n_train=70, n_val=14, n_test=70, shortcut_strength=0.0), seed=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
