import math

import numpy as np
import pytest

from mpcswitch.errors import ConfigError, ModelError
from mpcswitch.opponent import (BehaviorParams, likelihood, log_likelihood,
                                mean_input, sample_input)
from mpcswitch.world import ScenarioConfig, VehicleState

MODE_DENSITY = 1.0 / (0.5 * math.sqrt(2.0 * math.pi))


def overlapping_cfg(ramp) -> ScenarioConfig:
    """Both vehicles on the same straight line so distance = |s_e - s_o|."""
    d = ramp.to_dict()
    d["name"] = "shared_line"
    d["ego_path"] = {"kind": "straight", "waypoints": [[0, 0], [200, 0]]}
    d["opp_path"] = {"kind": "straight", "waypoints": [[0, 0], [200, 0]]}
    d["arrival_window"] = None
    return ScenarioConfig.from_dict(d)


@pytest.fixture(scope="module")
def line(ramp):
    return overlapping_cfg(ramp)


@pytest.fixture(scope="module")
def params(line) -> BehaviorParams:
    return line.behavior


def test_cruising_equilibrium(line, params):
    # far apart and already at v_star: no correction
    u = mean_input(params, -1.0, VehicleState(100.0, params.v_star),
                   VehicleState(0.0, 9.0), line)
    assert u == pytest.approx(0.0)


def test_aggressive_mean_hand_value(line, params):
    # within d_int, K=1, theta=+1, v_e=9, dv=2, v_o=8 -> 3.0 (before clamp)
    u = mean_input(params, 1.0, VehicleState(5.0, 8.0),
                   VehicleState(2.0, 9.0), line)
    assert u == pytest.approx(3.0)


def test_cautious_mean_hand_value(line, params):
    u = mean_input(params, -1.0, VehicleState(5.0, 8.0),
                   VehicleState(2.0, 9.0), line)
    assert u == pytest.approx(-1.0)


def test_mean_clamped_to_bounds(line, params):
    # target far above current speed: raw K error exceeds u_max
    u = mean_input(params, 1.0, VehicleState(5.0, 0.0),
                   VehicleState(2.0, 9.0), line)
    assert u == line.uo_max


def test_standstill_floor(line, params):
    # ego nearly stopped: a yielding opponent aims for 0, never negative
    u = mean_input(params, -1.0, VehicleState(5.0, 1.0),
                   VehicleState(4.0, 0.5), line)
    assert u == pytest.approx(params.k_gain * (0.0 - 1.0))


def test_unknown_theta_rejected(line, params):
    with pytest.raises(ModelError):
        mean_input(params, 0.5, VehicleState(0.0, 8.0),
                   VehicleState(0.0, 8.0), line)


def test_sample_sigma_zero_is_mean(line, params):
    d = line.to_dict()
    d["behavior"]["sigma"] = 1e-300
    tight = ScenarioConfig.from_dict(d)
    opp, ego = VehicleState(5.0, 8.0), VehicleState(2.0, 9.0)
    rng = np.random.default_rng(0)
    u = sample_input(tight.behavior, 1.0, opp, ego, tight, rng)
    assert u == pytest.approx(mean_input(tight.behavior, 1.0, opp, ego,
                                         tight))


def test_sample_deterministic(line, params):
    opp, ego = VehicleState(5.0, 8.0), VehicleState(2.0, 9.0)
    a = sample_input(params, 1.0, opp, ego, line, np.random.default_rng(7))
    b = sample_input(params, 1.0, opp, ego, line, np.random.default_rng(7))
    assert a == b


def test_sample_mean_clt(line, params):
    # 10^4 draws: sample mean within 3 sigma / 100 of the policy mean
    opp, ego = VehicleState(6.0, 7.5), VehicleState(2.0, 8.5)
    rng = np.random.default_rng(42)
    draws = np.array([sample_input(params, -1.0, opp, ego, line, rng)
                      for _ in range(10_000)])
    mu = mean_input(params, -1.0, opp, ego, line)
    assert abs(draws.mean() - mu) < 3.0 * params.sigma / 100.0


def test_one_draw_per_call(line, params):
    # matched-seed contract: consumption independent of the states passed
    r1 = np.random.default_rng(3)
    r2 = np.random.default_rng(3)
    sample_input(params, 1.0, VehicleState(5.0, 8.0), VehicleState(2.0, 9.0),
                 line, r1)
    sample_input(params, -1.0, VehicleState(90.0, 2.0), VehicleState(0.0, 4.0),
                 line, r2)
    assert r1.standard_normal() == r2.standard_normal()


def test_likelihood_at_mode(line, params):
    opp, ego = VehicleState(5.0, 8.0), VehicleState(2.0, 9.0)
    mu = mean_input(params, 1.0, opp, ego, line)
    assert likelihood(params, 1.0, mu, opp, ego, line) == pytest.approx(
        MODE_DENSITY, rel=1e-9)
    assert MODE_DENSITY == pytest.approx(0.7979, abs=1e-4)


def test_likelihood_one_sigma_shape(line, params):
    opp, ego = VehicleState(5.0, 8.0), VehicleState(2.0, 9.0)
    mu = mean_input(params, 1.0, opp, ego, line)
    for off in (-params.sigma, params.sigma):
        val = likelihood(params, 1.0, mu + off, opp, ego, line)
        assert val == pytest.approx(MODE_DENSITY * math.exp(-0.5), rel=1e-9)


def test_likelihood_ratio_far_apart(line, params):
    # beyond d_int the policy is theta-independent: ratio exactly 1
    opp, ego = VehicleState(150.0, 8.0), VehicleState(2.0, 9.0)
    lc = likelihood(params, -1.0, 0.7, opp, ego, line)
    la = likelihood(params, 1.0, 0.7, opp, ego, line)
    assert lc == la


def test_likelihood_integrates_to_one(line, params):
    opp, ego = VehicleState(5.0, 8.0), VehicleState(2.0, 9.0)
    grid = np.linspace(-8.0, 8.0, 4001)
    vals = [likelihood(params, -1.0, u, opp, ego, line) for u in grid]
    assert np.trapezoid(vals, grid) == pytest.approx(1.0, abs=1e-3)


def test_log_likelihood_consistent(line, params):
    opp, ego = VehicleState(5.0, 8.0), VehicleState(2.0, 9.0)
    val = likelihood(params, -1.0, 0.3, opp, ego, line)
    assert math.log(val) == pytest.approx(
        log_likelihood(params, -1.0, 0.3, opp, ego, line))


def test_params_validation():
    with pytest.raises(ConfigError):
        BehaviorParams(sigma=0.0)
    with pytest.raises(ConfigError):
        BehaviorParams(theta_set=(1.0, 1.0))
    with pytest.raises(ConfigError):
        BehaviorParams(d_int=-1.0)
