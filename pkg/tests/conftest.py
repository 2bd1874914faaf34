import time

import pytest

from stormscan.tensor import Rng, rng_fill


@pytest.fixture
def rng():
    return Rng(1234)


def random_array(seed, shape, scale=1.0):
    return rng_fill(Rng(seed), shape, scale)


@pytest.fixture
def arr():
    return random_array


DESK_FRAMES = (32, 64, 128, 256, 512)


@pytest.fixture(scope="session")
def desk_profile_timed():
    """Desk-default latency profile (uncompressed and 4x temporal pooling) and its wall time in seconds."""
    from stormscan.profiler import PipelineConfig, latency_profile

    start = time.perf_counter()
    profile = latency_profile(PipelineConfig.desk(repetitions=5), DESK_FRAMES)
    return profile, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_profile(desk_profile_timed):
    return desk_profile_timed[0]
