import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from PixelEnvironments import PointGoalPixels, GridAvoidPixels, ChainPixels
from Victims import ScriptedPointGoalVictim, ScriptedGridVictim, ConstantVictim

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Run slow directional experiments")

def pytest_configure(config):
    config.addinivalue_line("markers", "slow: expensive directional experiment, needs --runslow")

def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)

@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)

@pytest.fixture
def point_env():
    return PointGoalPixels(seed=0, obs_size=16, episode_horizon=10)

@pytest.fixture
def point_victim(point_env):
    return ScriptedPointGoalVictim(point_env.spec, point_env.max_speed)

@pytest.fixture
def grid_env():
    return GridAvoidPixels(seed=0, obs_size=20, episode_horizon=20)

@pytest.fixture
def grid_victim(grid_env):
    return ScriptedGridVictim(grid_env.spec, grid_env.grid_size)

@pytest.fixture
def chain_env():
    return ChainPixels(seed=0)

@pytest.fixture
def chain_victim(chain_env):
    return ConstantVictim(chain_env.spec, action=1)
