import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("dorl", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dorl")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_benchmark():
    """Three small default domains rendered at 32 px (tiny profile size)."""
    from dorl import synthcells
    sets = synthcells.gen_benchmark(n_domains=3, n_classes=4, n_per_class=6, seed=3)
    return [synthcells.resize_dataset(d, 32) for d in sets]
