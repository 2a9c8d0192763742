import json

import numpy as np
import pytest

from mpcswitch.errors import ConfigError
from mpcswitch.world import (CostWeights, PathSpec, ScenarioConfig,
                             VehicleState, load_preset, paths_interact,
                             position_on_path, safety_margin, stage_cost,
                             step_dynamics, terminal_cost)

from conftest import straight_path


# -- paths -----------------------------------------------------------------


def test_straight_path_interpolation():
    p = straight_path()
    assert np.allclose(p.position(10.0), [10.0, 0.0])


def test_path_start_is_first_waypoint():
    p = PathSpec("ramp-merge-ego", [[3.0, -7.0], [20.0, 0.0], [40.0, 0.0]])
    assert np.allclose(p.position(0.0), [3.0, -7.0])


def test_two_segment_arc_walk():
    p = PathSpec("straight", [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
    assert np.allclose(p.position(15.0), [10.0, 5.0])


def test_path_extends_past_both_ends():
    p = straight_path(length=10.0)
    assert np.allclose(p.position(15.0), [15.0, 0.0])
    assert np.allclose(p.position(-5.0), [-5.0, 0.0])


def test_path_is_1_lipschitz(rng):
    p = PathSpec("straight", [[0.0, 0.0], [8.0, 6.0], [8.0, 20.0],
                              [30.0, 20.0]])
    s = rng.uniform(-5.0, p.total_length + 5.0, size=(200, 2))
    pos = p.positions(s.ravel()).reshape(200, 2, 2)
    gaps = np.linalg.norm(pos[:, 0] - pos[:, 1], axis=1)
    assert np.all(gaps <= np.abs(s[:, 0] - s[:, 1]) + 1e-12)


def test_duplicate_waypoints_rejected():
    with pytest.raises(ConfigError, match="arc length"):
        PathSpec("straight", [[0.0, 0.0], [0.0, 0.0], [10.0, 0.0]])


def test_unknown_path_kind_rejected():
    with pytest.raises(ConfigError, match="kind"):
        PathSpec("spiral", [[0.0, 0.0], [1.0, 0.0]])


def test_position_on_path_matches_method():
    p = straight_path()
    assert np.allclose(position_on_path(p, 42.0), p.position(42.0))


# -- dynamics ----------------------------------------------------------------


def test_zoh_constant_velocity():
    x = step_dynamics(VehicleState(0.0, 10.0), 0.0, 0.05)
    assert x.s == pytest.approx(0.5) and x.v == pytest.approx(10.0)


def test_zoh_from_rest():
    x = step_dynamics(VehicleState(0.0, 0.0), 2.0, 0.05)
    assert x.s == pytest.approx(0.0025) and x.v == pytest.approx(0.1)


def test_zoh_braking():
    x = step_dynamics(VehicleState(5.0, 8.0), -4.0, 0.05)
    assert x.s == pytest.approx(5.395) and x.v == pytest.approx(7.8)


def test_zoh_composition_exact():
    x = VehicleState(1.5, 7.25)
    for _ in range(40):
        x = step_dynamics(x, 0.0, 0.1)
    assert x.s == pytest.approx(1.5 + 40 * 0.1 * 7.25, abs=1e-12)
    assert x.v == 7.25


def test_zoh_rejects_bad_dt():
    with pytest.raises(ConfigError):
        step_dynamics(VehicleState(0.0, 0.0), 0.0, 0.0)


# -- safety margin -------------------------------------------------------------


def test_margin_coincident(ramp):
    # both vehicles on top of the conflict point: distance ~0
    s_e, s_o, _ = ramp.conflict_point()
    m = safety_margin(VehicleState(s_e, 5.0), VehicleState(s_o, 5.0), ramp)
    assert m == pytest.approx(-2.0, abs=1e-3)


def test_margin_five_meters():
    d = load_preset("ramp_merge").to_dict()
    d["ego_path"] = {"kind": "straight", "waypoints": [[0, 0], [100, 0]]}
    d["opp_path"] = {"kind": "straight", "waypoints": [[5, 0], [105, 0]]}
    cfg = ScenarioConfig.from_dict(d)
    m = safety_margin(VehicleState(0.0, 0.0), VehicleState(0.0, 0.0), cfg)
    assert m == pytest.approx(3.0)


def test_margin_ramp_merge_upstream(ramp):
    # ego at the merge point; opponent 2.5 m upstream on the mainline
    s_e, _, _ = ramp.conflict_point()
    m = safety_margin(VehicleState(s_e, 8.0), VehicleState(34.5, 8.0), ramp)
    assert m == pytest.approx(0.5, abs=1e-3)


def test_margin_symmetric(ramp, rng):
    for _ in range(20):
        e = VehicleState(rng.uniform(0, 50), 5.0)
        o = VehicleState(rng.uniform(0, 50), 5.0)
        d = ramp.to_dict()
        d["ego_path"], d["opp_path"] = d["opp_path"], d["ego_path"]
        swapped = ScenarioConfig.from_dict(d)
        assert safety_margin(e, o, ramp) == pytest.approx(
            safety_margin(VehicleState(o.s, o.v), VehicleState(e.s, e.v),
                          swapped))


def test_paths_interact_parallel_far(far_apart):
    assert not paths_interact(far_apart)


def test_paths_interact_crossing(crossing):
    assert paths_interact(crossing)


# -- costs ---------------------------------------------------------------------


def test_stage_cost_zero_at_reference():
    w = CostWeights(q_v=1.0, r_u=0.1, q_f=10.0, v_ref=9.0)
    assert stage_cost(VehicleState(0.0, 9.0), 0.0, w) == 0.0


def test_stage_cost_hand_value():
    w = CostWeights(q_v=1.0, r_u=0.1, q_f=10.0, v_ref=9.0)
    assert stage_cost(VehicleState(0.0, 8.0), 2.0, w) == pytest.approx(1.4)


def test_terminal_cost_zero_at_reference():
    w = CostWeights(q_v=1.0, r_u=0.1, q_f=10.0, v_ref=9.0)
    assert terminal_cost(VehicleState(0.0, 9.0), w) == 0.0


def test_costs_nonnegative(rng):
    w = CostWeights(q_v=1.0, r_u=0.1, q_f=10.0, v_ref=9.0)
    for _ in range(50):
        x = VehicleState(rng.uniform(-10, 10), rng.uniform(-5, 20))
        u = rng.uniform(-6, 6)
        assert stage_cost(x, u, w) >= 0.0
        assert terminal_cost(x, w) >= 0.0


def test_negative_weights_rejected():
    with pytest.raises(ConfigError):
        CostWeights(q_v=-1.0, r_u=0.1, q_f=10.0, v_ref=9.0)


# -- config ----------------------------------------------------------------------


def test_config_roundtrip(ramp):
    again = ScenarioConfig.from_dict(json.loads(ramp.to_json()))
    assert again.config_hash() == ramp.config_hash()


def test_config_hash_changes_with_field(ramp):
    d = ramp.to_dict()
    d["d_safe"] = 2.5
    assert ScenarioConfig.from_dict(d).config_hash() != ramp.config_hash()


def test_unknown_field_named(ramp):
    d = ramp.to_dict()
    d["warp_drive"] = 1
    with pytest.raises(ConfigError, match="warp_drive"):
        ScenarioConfig.from_dict(d)


@pytest.mark.parametrize("field,value,match", [
    ("dt", 0.0, "dt"),
    ("d_safe", -1.0, "d_safe"),
    ("u_min", 1.0, "bounds"),
    ("branch_horizon", 20, "branch_horizon"),
])
def test_invalid_values_rejected(ramp, field, value, match):
    d = ramp.to_dict()
    d[field] = value
    with pytest.raises(ConfigError, match=match):
        ScenarioConfig.from_dict(d)


def test_presets_load_and_differ():
    names = ("ramp_merge", "intersection", "probing")
    hashes = {load_preset(n).config_hash() for n in names}
    assert len(hashes) == 3


def test_unknown_preset():
    with pytest.raises(ConfigError, match="nowhere"):
        load_preset("nowhere")


def test_conflict_point_ramp(ramp):
    s_e, s_o, dist = ramp.conflict_point()
    # the ramp meets the mainline at (37, 0)
    assert np.allclose(ramp.ego_path.position(s_e), [37.0, 0.0], atol=0.5)
    assert np.allclose(ramp.opp_path.position(s_o), [37.0, 0.0], atol=0.5)
    assert dist < 0.1
