"""Scenario-tree topology, opponent-input sampling, and reach weights.

A tree has a branching phase (full B-ary splits up to the branch horizon) and
a propagation phase (single chains down to the full horizon). Opponent input
samples attach to every non-root node; reach weights propagate belief-
marginalized transition probabilities from the root.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .opponent import BehaviorParams, likelihood
from .world import ScenarioConfig, VehicleState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TreeTopology:
    """Index-based scenario-tree topology.

    Nodes are numbered 0..n_nodes-1 in breadth-first order with the root at
    0. parent[0] = -1. depth increases by one along every edge; children of
    depth < branch_horizon nodes number `branching`, then chains of single
    children run to depth == horizon.
    """

    horizon: int
    branch_horizon: int
    branching: int
    parent: np.ndarray      # (n,) int64, -1 at root
    depth: np.ndarray       # (n,) int64
    children: tuple         # tuple of tuples of child indices
    is_leaf: np.ndarray     # (n,) bool

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def leaves(self) -> np.ndarray:
        return np.where(self.is_leaf)[0]

    @property
    def n_nonleaf(self) -> int:
        return int(np.count_nonzero(~self.is_leaf))


@dataclass(frozen=True)
class NodeSamples:
    """Per-node opponent-input samples.

    For the non-reactive scheme `u_hat` holds literal accelerations. For the
    reactive scheme the input is the expression mu_theta(parent states) + d,
    resolved inside the NLP, and `u_hat` is NaN; `theta` and `d` parameterize
    the expression. Root entries are NaN/0 placeholders.
    """

    theta: np.ndarray   # (n,) latent hypothesis per node (0.0 where unused)
    d: np.ndarray       # (n,) additive noise draw per node
    u_hat: np.ndarray   # (n,) resolved input, NaN for symbolic (reactive)
    reactive: bool


@dataclass(frozen=True)
class NodeWeights:
    """Reach probabilities per node; w[root] = 1, leaf weights sum to 1."""

    w: np.ndarray
    transition: np.ndarray  # per-node transition probability from parent


def build_topology(horizon: int, branch_horizon: int, branching: int,
                   cap: int = 2047) -> TreeTopology:
    """Build the two-phase scenario-tree topology.

    Full `branching`-ary splits at depths 0..branch_horizon-1, then single
    chains to depth `horizon`. Node count follows the closed form
    sum_{k=0}^{H_b} B^k + B^{H_b} (H - H_b).
    """
    if not (0 < branch_horizon < horizon):
        raise ConfigError("need 0 < branch_horizon < horizon")
    if branching < 2:
        raise ConfigError("branching factor must be at least 2")
    n_expect = sum(branching ** k for k in range(branch_horizon + 1))
    n_expect += branching ** branch_horizon * (horizon - branch_horizon)
    if n_expect > cap:
        raise ConfigError(f"tree would have {n_expect} nodes, cap is {cap}")

    parent = [-1]
    depth = [0]
    frontier = [0]
    for dep in range(1, horizon + 1):
        nxt = []
        fan = branching if dep <= branch_horizon else 1
        for p in frontier:
            for _ in range(fan):
                parent.append(p)
                depth.append(dep)
                nxt.append(len(parent) - 1)
        frontier = nxt

    parent = np.asarray(parent, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.int64)
    n = len(parent)
    kids = [[] for _ in range(n)]
    for i in range(1, n):
        kids[parent[i]].append(i)
    is_leaf = np.array([len(k) == 0 for k in kids], dtype=bool)
    return TreeTopology(horizon, branch_horizon, branching, parent, depth,
                        tuple(tuple(k) for k in kids), is_leaf)


def assign_nonreactive(top: TreeTopology, u_o_now: float, scheme: str,
                       sigma: float, rng: np.random.Generator | None = None) -> NodeSamples:
    """Attach non-reactive input samples u_hat_n = u_o_now + d_n.

    `sigma-point` (default, deterministic): branch-phase siblings carry the
    symmetric offsets {+sigma, -sigma} (binary trees only), propagation nodes
    carry 0. `random`: d_n ~ N(0, sigma^2) everywhere via the caller's rng.

    Propagation nodes extrapolate deceleration estimates as transient:
    past the branching phase the held input is max(u_o_now, 0). Counting on
    a stranger to keep braking for the rest of the horizon is the classic
    unsafe extrapolation; counting on them to keep accelerating is the
    conservative one, so positive estimates persist.
    """
    n = top.n_nodes
    d = np.zeros(n)
    chain = np.zeros(n, dtype=bool)
    if scheme == "sigma-point":
        if top.branching != 2:
            raise ConfigError("sigma-point scheme requires binary branching")
        for p in range(n):
            ch = top.children[p]
            if len(ch) == 2:
                d[ch[0]] = sigma
                d[ch[1]] = -sigma
            elif len(ch) == 1:
                chain[ch[0]] = True
    elif scheme == "random":
        if rng is None:
            raise ConfigError("random scheme needs an rng")
        d[1:] = rng.normal(0.0, sigma, size=n - 1)
        for p in range(n):
            ch = top.children[p]
            if len(ch) == 1:
                chain[ch[0]] = True
    else:
        raise ConfigError(f"unknown non-reactive scheme {scheme!r}")
    u_hat = u_o_now + d
    u_hat[chain] = max(u_o_now, 0.0) + d[chain]
    u_hat[0] = np.nan
    d[0] = 0.0
    return NodeSamples(theta=np.zeros(n), d=d, u_hat=u_hat, reactive=False)


def assign_reactive(top: TreeTopology, theta_set, scheme: str, sigma: float,
                    rng: np.random.Generator | None = None) -> NodeSamples:
    """Attach reactive (symbolic) samples: u_hat_n = mu_theta_n(parent) + d_n.

    `max-likelihood` (default, deterministic): at every branch-phase split the
    siblings take the distinct theta values in theta_set order with d_n = 0;
    propagation nodes inherit their parent's theta. The leftmost chain is
    therefore the first theta (cautious) throughout, the rightmost the last.
    `random`: theta_n uniform over theta_set and d_n ~ N(0, sigma^2).
    """
    theta_set = tuple(float(t) for t in theta_set)
    n = top.n_nodes
    theta = np.zeros(n)
    d = np.zeros(n)
    if scheme == "max-likelihood":
        if top.branching != len(theta_set):
            raise ConfigError("max-likelihood scheme needs branching == |theta_set|")
        for p in range(n):
            ch = top.children[p]
            if len(ch) == top.branching and len(ch) > 1:
                for j, c in enumerate(ch):
                    theta[c] = theta_set[j]
            elif len(ch) == 1:
                theta[ch[0]] = theta[p] if top.depth[p] > 0 else theta_set[0]
    elif scheme == "random":
        if rng is None:
            raise ConfigError("random scheme needs an rng")
        theta[1:] = rng.choice(theta_set, size=n - 1)
        d[1:] = rng.normal(0.0, sigma, size=n - 1)
    else:
        raise ConfigError(f"unknown reactive scheme {scheme!r}")
    u_hat = np.full(n, np.nan)
    return NodeSamples(theta=theta, d=d, u_hat=u_hat, reactive=True)


def node_weights(top: TreeTopology, samples: NodeSamples, beliefs, states,
                 params: BehaviorParams, cfg: ScenarioConfig) -> NodeWeights:
    """Numeric reach weights from resolved inputs, states, and beliefs.

    For each non-root node n the marginal density is
    rho(u_hat_n) = sum_theta b_parent(theta) rho_theta(u_hat_n | x_n),
    evaluated at the node's own states (the formulas are followed literally
    even though reactive samples condition on parent states; the asymmetry is
    deliberate and documented). Transitions normalize rho over siblings and
    w_n = w_parent * transition_n.

    beliefs: sequence of probability vectors per node (parent beliefs are
    looked up by index). states: sequence of (opp: VehicleState,
    ego: VehicleState) per node. For symbolic (reactive) samples the resolved
    u_hat must be supplied via states-consistent `samples.u_hat`; NaNs raise.
    """
    n = top.n_nodes
    w = np.zeros(n)
    tr = np.zeros(n)
    w[0] = 1.0
    tr[0] = 1.0
    for p in range(n):
        ch = top.children[p]
        if not ch:
            continue
        bp = np.asarray(beliefs[p], dtype=float)
        rho = np.empty(len(ch))
        for j, c in enumerate(ch):
            u = samples.u_hat[c]
            if not np.isfinite(u):
                raise ConfigError("node_weights needs resolved u_hat values")
            opp_c, ego_c = states[c]
            rho[j] = sum(bp[i] * likelihood(params, th, u, opp_c, ego_c, cfg)
                         for i, th in enumerate(params.theta_set))
        total = rho.sum()
        if total < 1e-300:
            log.warning("all sibling densities underflow at node %d; "
                        "using uniform transition", p)
            t = np.full(len(ch), 1.0 / len(ch))
        else:
            t = rho / total
        for j, c in enumerate(ch):
            tr[c] = t[j]
            w[c] = w[p] * t[j]
    return NodeWeights(w=w, transition=tr)
