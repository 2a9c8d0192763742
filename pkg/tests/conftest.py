import logging

import numpy as np
import pytest

from mpcswitch.world import PathSpec, ScenarioConfig, load_preset

logging.getLogger("mpcswitch").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def ramp() -> ScenarioConfig:
    return load_preset("ramp_merge")


@pytest.fixture(scope="session")
def crossing() -> ScenarioConfig:
    return load_preset("intersection")


@pytest.fixture(scope="session")
def fast(ramp) -> ScenarioConfig:
    """Ramp merge with a short horizon; cheap enough for solver-heavy tests."""
    d = ramp.to_dict()
    d["name"] = "ramp_fast"
    d["horizon"] = 8
    return ScenarioConfig.from_dict(d)


@pytest.fixture(scope="session")
def far_apart(ramp) -> ScenarioConfig:
    """Parallel straight paths 50 m apart: no interaction anywhere."""
    d = ramp.to_dict()
    d["name"] = "parallel_far"
    d["ego_path"] = {"kind": "straight",
                     "waypoints": [[0.0, 0.0], [200.0, 0.0]]}
    d["opp_path"] = {"kind": "straight",
                     "waypoints": [[0.0, 50.0], [200.0, 50.0]]}
    d["ego_goal_s"] = 60.0
    d["arrival_window"] = None
    return ScenarioConfig.from_dict(d)


def straight_path(y: float = 0.0, length: float = 100.0) -> PathSpec:
    return PathSpec("straight", [[0.0, y], [length, y]])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
