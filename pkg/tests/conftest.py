import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def schema():
    from vulnboost.dataset import FeatureSchema
    return FeatureSchema.default()


@pytest.fixture(scope="session")
def small_records():
    from vulnboost.dataset import SKEWED_WEIGHTS, synth_dataset
    return synth_dataset(1100, SKEWED_WEIGHTS, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_records, schema):
    from vulnboost.dataset import encode_dataset
    return encode_dataset(small_records, schema)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
