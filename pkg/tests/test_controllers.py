"""NLP solver and formulation tests.

The LQ oracles below re-derive the optimal inputs by dynamic programming
on the speed error e = v - v_ref.  Two Riccati recursions cover every
formulation when the opponent is too far away for any constraint or
interaction term to matter:

  chain (one stage cost per step):
      P_H = q_f,  P_k = q_v + P' - (dt P')^2 / (r_u + dt^2 P')
  tree (unweighted node sum, so depth k < H_b counts B times):
      same recursion with P' replaced by c_k P', c_k = B for k < H_b else 1

The robust chain, the reactive single-hypothesis chain, and the implicit
dual (whose uniform far-field weights cancel the node multiplicity) follow
the first; the unweighted tree formulations follow the second.
"""

import numpy as np
import numpy.testing as npt
import pytest
from test_opponent import overlapping_cfg

from mpcswitch import (
    Belief,
    ControllerLevel,
    NlpProblem,
    VehicleState,
    build_controller,
    info_gain,
    solve_branch_nonreactive,
    solve_branch_reactive,
    solve_dual_explicit,
    solve_dual_implicit,
    solve_nlp,
    solve_robust,
)
from mpcswitch.controllers import (
    _robust_problem,
    _topology_arrays,
    _tree_problem,
    solve_reactive_chain,
)
from mpcswitch.errors import ModelError
from mpcswitch.world import ScenarioConfig

OK_STATUSES = ("converged", "max-iter")


def retuned(cfg: ScenarioConfig, **over) -> ScenarioConfig:
    d = cfg.to_dict()
    d["tol_feas"] = 1e-8
    d["tol_opt"] = 1e-7
    d["max_iter"] = 300
    d.update(over)
    return ScenarioConfig.from_dict(d)


def lq_inputs(cfg: ScenarioConfig, v0: float, mult):
    """Optimal inputs by backward Riccati sweep plus forward rollout."""
    w = cfg.weights
    dt = cfg.dt
    P = w.q_f
    gains = np.empty(cfg.horizon)
    for k in reversed(range(cfg.horizon)):
        cp = mult[k] * P
        gains[k] = dt * cp / (w.r_u + dt * dt * cp)
        P = w.q_v + cp - dt * cp * gains[k]
    e = v0 - w.v_ref
    us = np.empty(cfg.horizon)
    for k in range(cfg.horizon):
        us[k] = -gains[k] * e
        e += dt * us[k]
    return us, P  # P is now P_0


def per_node(cfg: ScenarioConfig, us_by_depth):
    """Spread per-depth inputs onto the tree's non-leaf input layout."""
    top, var_of, _, _, _ = _topology_arrays(cfg)
    out = np.empty(top.n_nonleaf)
    for n in range(top.n_nodes):
        if var_of[n] >= 0:
            out[var_of[n]] = us_by_depth[top.depth[n]]
    return out


def tree_mult(cfg: ScenarioConfig):
    return [cfg.branching if k < cfg.branch_horizon else 1
            for k in range(cfg.horizon)]


@pytest.fixture(scope="module")
def far(far_apart) -> ScenarioConfig:
    return retuned(far_apart)


@pytest.fixture(scope="module")
def line(ramp) -> ScenarioConfig:
    return retuned(overlapping_cfg(ramp))


def far_states(cfg, dv: float = -0.5):
    ego = VehicleState(s=5.0, v=cfg.weights.v_ref + dv)
    opp = VehicleState(s=100.0, v=cfg.behavior.v_star)
    return ego, opp


# -- bare NLP solver ----------------------------------------------------------


def scalar_problem(upper: float = 10.0) -> NlpProblem:
    def obj(x):
        return 0.5 * x[0] * x[0] - x[0], np.array([x[0] - 1.0])

    return NlpProblem(objective=obj, constraints=None,
                      lower=np.array([-10.0]), upper=np.array([upper]),
                      x0=np.zeros(1))


def test_nlp_scalar_quadratic():
    sol = solve_nlp(scalar_problem())
    assert sol.status == "converged"
    assert sol.u0 == pytest.approx(1.0, abs=1e-6)
    assert sol.objective == pytest.approx(-0.5, abs=1e-8)
    assert sol.max_violation == 0.0


def test_nlp_box_bound_active():
    sol = solve_nlp(scalar_problem(upper=0.5))
    assert sol.status == "converged"
    assert sol.u0 == pytest.approx(0.5, abs=1e-8)


def test_nlp_inequality_active():
    def obj(x):
        return x[0] * x[0], np.array([2.0 * x[0]])

    def con(x):
        return np.array([x[0] - 2.0]), np.array([[1.0]])

    prob = NlpProblem(objective=obj, constraints=con,
                      lower=np.array([-10.0]), upper=np.array([10.0]),
                      x0=np.zeros(1))
    sol = solve_nlp(prob)
    assert sol.status == "converged"
    assert sol.u0 == pytest.approx(2.0, abs=1e-6)
    assert sol.max_violation <= 1e-8


# -- LQ oracles, every formulation --------------------------------------------


def test_robust_matches_chain_riccati(far):
    ego, opp = far_states(far)
    us, p0 = lq_inputs(far, ego.v, np.ones(far.horizon))
    sol = solve_robust(ego, opp, far)
    assert sol.status in OK_STATUSES
    npt.assert_allclose(sol.inputs, us, atol=1e-4)
    e0 = ego.v - far.weights.v_ref
    assert sol.objective == pytest.approx(p0 * e0 * e0, rel=1e-5)


def test_reactive_chain_matches_chain_riccati(far):
    ego, opp = far_states(far)
    us, _ = lq_inputs(far, ego.v, np.ones(far.horizon))
    for theta in far.behavior.theta_set:
        sol = solve_reactive_chain(ego, opp, theta, far)
        assert sol.status in OK_STATUSES
        npt.assert_allclose(sol.inputs, us, atol=1e-4)


def test_nonreactive_matches_tree_riccati(far):
    ego, opp = far_states(far)
    us, _ = lq_inputs(far, ego.v, tree_mult(far))
    sol = solve_branch_nonreactive(ego, opp, 0.0, far)
    assert sol.status in OK_STATUSES
    npt.assert_allclose(sol.inputs, per_node(far, us), atol=1e-4)


def test_reactive_matches_tree_riccati(far):
    ego, opp = far_states(far)
    us, _ = lq_inputs(far, ego.v, tree_mult(far))
    sol = solve_branch_reactive(ego, opp, far)
    assert sol.status in OK_STATUSES
    npt.assert_allclose(sol.inputs, per_node(far, us), atol=1e-4)


def test_explicit_zero_gain_matches_tree_riccati(far):
    cfg = retuned(far, c_explore=0.0)
    ego, opp = far_states(cfg)
    us, _ = lq_inputs(cfg, ego.v, tree_mult(cfg))
    sol = solve_dual_explicit(ego, opp, Belief([0.5, 0.5]), cfg)
    assert sol.status in OK_STATUSES
    npt.assert_allclose(sol.inputs, per_node(cfg, us), atol=1e-4)


def test_implicit_far_matches_chain_riccati(far):
    # uniform far-field weights are B^-depth per node, cancelling the node
    # multiplicity, so the weighted tree collapses to the plain chain
    ego, opp = far_states(far)
    us, _ = lq_inputs(far, ego.v, np.ones(far.horizon))
    sol = solve_dual_implicit(ego, opp, Belief([0.5, 0.5]), far)
    assert sol.status in OK_STATUSES
    npt.assert_allclose(sol.inputs, per_node(far, us), atol=1e-4)


# -- robust formulation ------------------------------------------------------


def test_robust_holds_reference_when_clear(far):
    ego = VehicleState(s=5.0, v=far.weights.v_ref)
    opp = VehicleState(s=150.0, v=6.0)
    sol = solve_robust(ego, opp, far)
    assert sol.status in OK_STATUSES
    assert abs(sol.u0) < 1e-3


def test_robust_yields_to_reachable_opponent(line):
    # slow opponent 12 m ahead on the shared line; its reachable envelope
    # blocks the lane, so tracking v_ref is not an option
    ego = VehicleState(s=20.0, v=line.weights.v_ref)
    opp = VehicleState(s=32.0, v=2.0)
    sol = solve_robust(ego, opp, line)
    assert sol.status in OK_STATUSES
    assert sol.u0 < -0.5


# -- nonreactive branch ------------------------------------------------------


def test_nonreactive_sigma_collapse(ramp, line):
    # vanishing spread makes every sibling subtree identical, so the
    # optimal inputs can differ only by solver noise across a depth
    cfg = retuned(line, behavior={**ramp.behavior.to_dict(), "sigma": 1e-9})
    ego = VehicleState(s=10.0, v=8.0)
    opp = VehicleState(s=40.0, v=7.0)
    sol = solve_branch_nonreactive(ego, opp, 1.0, cfg)
    assert sol.status in OK_STATUSES
    top, var_of, _, _, _ = _topology_arrays(cfg)
    for depth in range(cfg.horizon):
        at_depth = [sol.inputs[var_of[n]] for n in range(top.n_nodes)
                    if var_of[n] >= 0 and top.depth[n] == depth]
        assert max(at_depth) - min(at_depth) < 1e-4


def test_nonreactive_brakes_for_conflict(line):
    ego = VehicleState(s=10.0, v=line.weights.v_ref)
    opp = VehicleState(s=20.0, v=4.0)
    sol = solve_branch_nonreactive(ego, opp, 0.0, line)
    assert sol.status in OK_STATUSES
    assert sol.u0 < 0.0


# -- reactive branch ---------------------------------------------------------


def test_reactive_equals_nonreactive_outside_interaction(far):
    # outside d_int both hypotheses collapse onto k(v* - v_o); with the
    # opponent cruising at v* that is exactly zero, and a vanishing noise
    # spread gives the nonreactive tree the same resolved inputs
    cfg = retuned(far, behavior={**far.behavior.to_dict(), "sigma": 1e-9})
    ego, opp = far_states(cfg)
    sol_re = solve_branch_reactive(ego, opp, cfg)
    sol_nr = solve_branch_nonreactive(ego, opp, 0.0, cfg)
    assert sol_re.status in OK_STATUSES
    npt.assert_allclose(sol_re.inputs, sol_nr.inputs, atol=1e-6)


def leaf_by_child(top, pick: int) -> int:
    node = 0
    while not top.is_leaf[node]:
        kids = top.children[node]
        node = kids[pick] if len(kids) > 1 else kids[0]
    return node


def test_reactive_leaf_speed_ordering(line):
    # ego fronting inside d_int: the cautious hypothesis tracks a lower
    # target speed than the aggressive one, and the tree must keep that
    # separation all the way down to the leaves
    ego = VehicleState(s=20.0, v=8.0)
    opp = VehicleState(s=12.0, v=8.0)
    sol = solve_branch_reactive(ego, opp, line, want_diag=True)
    assert sol.status in OK_STATUSES
    top, _, _, _, _ = _topology_arrays(line)
    opp_v = sol.diag["opp_v"]
    assert opp_v[leaf_by_child(top, 0)] < opp_v[leaf_by_child(top, 1)] - 0.5


# -- explicit dual -----------------------------------------------------------


def test_info_gain_values():
    assert info_gain(np.array([1.0, 0.0]), (0, 0), (5, 0), 1.0, 10.0) == 0.0
    assert info_gain(Belief([0.5, 0.5]), (0.0, 0.0), (10.0, 0.0),
                     1.0, 10.0) == pytest.approx(0.0, abs=1e-12)
    got = info_gain(np.array([0.5, 0.5]), (0.0, 0.0), (8.0, 0.0), 1.0, 10.0)
    assert got == pytest.approx(-9.0, abs=1e-12)


def test_info_gain_needs_two_hypotheses():
    with pytest.raises(ModelError):
        info_gain(np.array([0.2, 0.3, 0.5]), (0, 0), (5, 0), 1.0, 10.0)


def test_explicit_one_hot_equals_reactive(line):
    ego = VehicleState(s=20.0, v=8.0)
    opp = VehicleState(s=12.0, v=8.0)
    sol_de = solve_dual_explicit(ego, opp, Belief([1.0, 0.0]), line)
    sol_rb = solve_branch_reactive(ego, opp, line)
    assert sol_de.status in OK_STATUSES
    npt.assert_allclose(sol_de.inputs, sol_rb.inputs, atol=1e-3)
    assert sol_de.u0 == pytest.approx(sol_rb.u0, abs=1e-3)


def test_explicit_probes_under_uncertainty(line):
    # opponent ahead but outside d_int; the gain term rewards closing the
    # squared distance while the belief is split, so the explicit dual
    # accelerates relative to the plain reactive branch
    cfg = retuned(line, c_explore=0.5)
    ego = VehicleState(s=10.0, v=cfg.weights.v_ref)
    opp = VehicleState(s=25.0, v=cfg.weights.v_ref)
    sol_de = solve_dual_explicit(ego, opp, Belief([0.5, 0.5]), cfg)
    sol_rb = solve_branch_reactive(ego, opp, cfg)
    assert sol_de.status in OK_STATUSES
    assert sol_de.u0 > sol_rb.u0 + 1e-3


# -- implicit dual -----------------------------------------------------------


def test_implicit_far_leaf_weights_uniform(far):
    ego, opp = far_states(far)
    sol = solve_dual_implicit(ego, opp, Belief([0.5, 0.5]), far,
                              want_diag=True)
    assert sol.status in OK_STATUSES
    top, _, _, _, _ = _topology_arrays(far)
    leaf_w = [sol.diag["weights"][n] for n in range(top.n_nodes)
              if top.is_leaf[n]]
    expected = far.branching ** -far.branch_horizon
    npt.assert_allclose(leaf_w, expected, atol=1e-9)
    assert sum(leaf_w) == pytest.approx(1.0, abs=1e-9)


def test_implicit_one_hot_starves_far_hypothesis(line):
    # ego tailing inside d_int, so its optimal root input is a brake; an
    # accelerating root would shift the hypothesis means between parent
    # and child states and inflate the starved branch past its prior mass
    ego = VehicleState(s=16.0, v=8.5)
    opp = VehicleState(s=20.0, v=8.0)
    sol = solve_dual_implicit(ego, opp, Belief([0.99, 0.01]), line,
                              want_diag=True)
    assert sol.status in OK_STATUSES
    top, _, _, _, _ = _topology_arrays(line)
    w = sol.diag["weights"]
    assert w[leaf_by_child(top, 1)] < 0.01
    leaf_w = [w[n] for n in range(top.n_nodes) if top.is_leaf[n]]
    assert sum(leaf_w) == pytest.approx(1.0, abs=1e-6)


# -- dispatch and warm starts -------------------------------------------------


def test_controller_dispatch_matches_direct_solves(far):
    ego, opp = far_states(far)
    b = Belief([0.5, 0.5])
    direct = {
        1: solve_robust(ego, opp, far).u0,
        2: solve_branch_nonreactive(ego, opp, 0.3, far).u0,
        3: solve_branch_reactive(ego, opp, far).u0,
        4: solve_dual_explicit(ego, opp, b, far).u0,
        5: solve_dual_implicit(ego, opp, b, far).u0,
    }
    for level, want in direct.items():
        ctl = build_controller(level, far)
        assert ctl.level == ControllerLevel(level)
        u0, sol = ctl.act(ego, opp, b, u_o_estimate=0.3)
        assert sol.status in OK_STATUSES
        assert u0 == pytest.approx(want, abs=1e-6)


def test_controller_equilibrium_repeat(far):
    ego = VehicleState(s=5.0, v=far.weights.v_ref)
    opp = VehicleState(s=100.0, v=far.behavior.v_star)
    ctl = build_controller(3, far)
    u_first, _ = ctl.act(ego, opp, Belief([0.5, 0.5]))
    u_second, _ = ctl.act(ego, opp, Belief([0.5, 0.5]))
    assert abs(u_first) < 1e-4
    assert u_second == pytest.approx(u_first, abs=1e-6)


def test_warm_start_agrees_with_cold(far):
    ego, opp = far_states(far)
    cold = solve_robust(ego, opp, far)
    warm = solve_robust(ego, opp, far, warm=np.full(far.horizon, 2.0))
    npt.assert_allclose(warm.inputs, cold.inputs, atol=1e-4)


# -- objective gradients ------------------------------------------------------


def fd_check(problem: NlpProblem, rng, n_points: int = 3, h: float = 1e-6):
    lo = np.where(np.isfinite(problem.lower), problem.lower, -4.0)
    hi = np.where(np.isfinite(problem.upper), problem.upper, 4.0)
    worst = 0.0
    for _ in range(n_points):
        x = rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo))
        _, grad = problem.objective(x)
        for i in rng.choice(len(x), size=min(6, len(x)), replace=False):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fp, _ = problem.objective(xp)
            fm, _ = problem.objective(xm)
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(fd - grad[i]) / max(1.0, abs(grad[i])))
    return worst


def test_objective_gradients_fd(line, rng):
    ego = VehicleState(s=14.0, v=8.0)
    opp = VehicleState(s=22.0, v=7.0)
    b = Belief([0.6, 0.4])
    probs = [
        _robust_problem(ego, opp, line, None),
        _tree_problem("nonreactive", ego, opp, line, None, 0.5, None, None),
        _tree_problem("reactive", ego, opp, line, None, None, None, None),
        _tree_problem("explicit", ego, opp, line, b, None, None, None),
        _tree_problem("implicit", ego, opp, line, b, None, None, None),
    ]
    for prob in probs:
        assert fd_check(prob, rng) < 1e-5
