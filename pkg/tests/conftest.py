import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from npplab.cqi import TrainConfig, train
from npplab.plant import default_plant_config


@pytest.fixture(scope="session")
def plant_config():
    return default_plant_config()


@pytest.fixture(scope="session")
def trained(plant_config):
    """Train once with the shipped defaults; shared by the learner tests,
    the fleets, and the acceptance gates. Returns (result, wall_seconds)."""
    start = time.monotonic()
    result = train(plant_config, TrainConfig())
    return result, time.monotonic() - start


@pytest.fixture(scope="session")
def expert_tree(trained):
    return trained[0].tree
