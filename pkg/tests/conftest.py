import os

import numpy as np
import pytest

from src.config.run_config import RunConfig
from src.core.services.property_suite import random_scene, tiny_config


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs, enabled with EQUIDIFF_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("EQUIDIFF_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set EQUIDIFF_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def tiny() -> RunConfig:
    return tiny_config()


@pytest.fixture
def scenes(rng, tiny):
    """Six scenes with futures and 0..5 neighbors."""
    return [
        random_scene(rng, n, tiny.history_frames, tiny.radius_m, with_future=tiny.future_frames, scene_id=f"s{n}")
        for n in range(6)
    ]
