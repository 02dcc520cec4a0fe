import numpy as np
import pytest

from core.gridworld import FormationGridEnv, Region, empty_map, parse_map
from services.learning import TrainConfig


def grid(text: str, start=None, goal=None):
    """Build a map from rows of '.' and '#'."""
    rows = [r for r in text.strip().splitlines()]
    body = f"{len(rows[0])} {len(rows)}\n" + "\n".join(rows) + "\n"
    grid_map = parse_map(body)
    if start is not None or goal is not None:
        grid_map = type(grid_map)(grid_map.cells, start or grid_map.start_region, goal or grid_map.goal_region)
    return grid_map


@pytest.fixture
def empty5():
    return empty_map(5)


@pytest.fixture
def empty10():
    return empty_map(10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def line3_env(empty10):
    """Three agents in a horizontal line on an empty 10x10 map."""
    offsets = np.array([[0, 0], [1, 0], [2, 0]])
    return FormationGridEnv(empty10, offsets)


@pytest.fixture
def tiny_config():
    return TrainConfig(total_episodes=5, batch_size=4, map_size=10, density=0.0, agent_count=2,
                       formation="line", pool_size=2, log_interval=1, seed=3)


@pytest.fixture
def corridor_regions():
    return Region(0, 0, 0, 0), Region(4, 0, 4, 0)


@pytest.fixture
def gap_env():
    """Line of three on a 10x10 map split by a wall with a single gap at (5, 5)."""
    rows = ["....." + ("." if y == 5 else "#") + "...." for y in range(10)]
    return FormationGridEnv(grid("\n".join(rows)), np.array([[0, 0], [1, 0], [2, 0]]))
