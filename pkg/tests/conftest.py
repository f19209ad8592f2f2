import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dpnsum.ard import prepare
from dpnsum.nsum import NsumData
from dpnsum.simgen import ScenarioConfig, generate

settings.register_profile("dpnsum", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dpnsum")


@pytest.fixture(scope="session")
def small_dataset():
    """Weighted 3-governorate synthetic survey (n=60, K=6)."""
    ds, truth = generate(ScenarioConfig(n=60, K=6, G=3, n_probe=4), 7)
    return prepare(ds), truth


@pytest.fixture(scope="session")
def tiny_data():
    """Kernel-ready arrays for an (n=5, K=3, G=2) dataset."""
    ds, _ = generate(ScenarioConfig(n=5, K=3, G=2, n_probe=2), 3)
    return NsumData.from_dataset(prepare(ds))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
