"""Paths, vehicle dynamics, safety geometry, costs, and scenario configuration.

Two vehicles move longitudinally along fixed 2-D paths. A path maps arc
position s to a Cartesian point; vehicle state is [s, v]; safety is a minimum
Euclidean distance between the two path points.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from importlib import resources
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericsError

PATH_KINDS = (
    "ramp-merge-ego",
    "ramp-merge-mainline",
    "intersection-ns",
    "intersection-ew",
    "straight",
)


class PathSpec:
    """Piecewise-linear 2-D path parameterized by arc length.

    Parameters
    ----------
    kind : str
        One of PATH_KINDS; identifies the role of the path in a scenario.
    waypoints : array-like, shape (n, 2)
        Ordered Cartesian points in meters. Consecutive points must be
        distinct (strictly increasing cumulative arc length).

    Queries beyond [0, total_length] continue straight along the terminal
    segment direction, so long planning horizons never fall off the path.
    """

    def __init__(self, kind: str, waypoints) -> None:
        if kind not in PATH_KINDS:
            raise ConfigError(f"unknown path kind {kind!r}")
        pts = np.asarray(waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ConfigError("path needs at least 2 waypoints of dimension 2")
        if not np.all(np.isfinite(pts)):
            raise NumericsError("non-finite waypoint coordinates")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ConfigError("waypoints must strictly increase in arc length")
        self.kind = kind
        self.waypoints = pts
        self.seg_len = seg_len
        self.cum_len = np.concatenate(([0.0], np.cumsum(seg_len)))
        self.dirs = seg / seg_len[:, None]  # unit tangent per segment
        self.total_length = float(self.cum_len[-1])

    def position(self, s: float) -> np.ndarray:
        return self.positions(np.asarray([s], dtype=float))[0]

    def positions(self, s: np.ndarray) -> np.ndarray:
        """Vectorized position query, shape (k, 2). Extends beyond both ends."""
        s = np.asarray(s, dtype=float)
        i = np.clip(np.searchsorted(self.cum_len, s, side="right") - 1, 0,
                    len(self.seg_len) - 1)
        rel = s - self.cum_len[i]
        return self.waypoints[i] + rel[:, None] * self.dirs[i]

    def closest_arc(self, point) -> float:
        """Arc position on this path closest to a Cartesian point.

        Exact per-segment projection (interior segments clamped to their
        ends, terminal segments unclamped to match the extended position
        query).
        """
        p = np.asarray(point, dtype=float)
        best_s, best_d2 = 0.0, np.inf
        n = len(self.seg_len)
        for j in range(n):
            t = float(np.dot(p - self.waypoints[j], self.dirs[j]))
            lo = -np.inf if j == 0 else 0.0
            hi = np.inf if j == n - 1 else self.seg_len[j]
            t = min(max(t, lo), hi)
            q = self.waypoints[j] + t * self.dirs[j]
            d2 = float(np.sum((p - q) ** 2))
            if d2 < best_d2:
                best_d2, best_s = d2, self.cum_len[j] + t
        return best_s

    def to_dict(self) -> dict:
        return {"kind": self.kind, "waypoints": self.waypoints.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PathSpec":
        return cls(d["kind"], d["waypoints"])


@dataclass(frozen=True)
class VehicleState:
    """Longitudinal state of one vehicle: arc position s (m), speed v (m/s)."""

    s: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.s) and math.isfinite(self.v)):
            raise NumericsError("vehicle state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v], dtype=float)


@dataclass(frozen=True)
class CostWeights:
    """Quadratic tracking-cost weights and the reference speed."""

    q_v: float = 1.0
    r_u: float = 0.1
    q_f: float = 10.0
    v_ref: float = 9.0

    def __post_init__(self):
        if min(self.q_v, self.r_u, self.q_f) < 0.0:
            raise ConfigError("cost weights must be nonnegative")
        if max(self.q_v, self.r_u, self.q_f) == 0.0:
            raise ConfigError("at least one cost weight must be positive")


def position_on_path(path: PathSpec, s: float) -> np.ndarray:
    """Point at arc distance s along the path (Cartesian, meters)."""
    return path.position(s)


def step_dynamics(x: VehicleState, u: float, dt: float) -> VehicleState:
    """Exact zero-order-hold double-integrator update.

    s' = s + v dt + u dt^2 / 2, v' = v + u dt. Exact for piecewise-constant
    acceleration, so input estimation from speed differences is lossless.
    """
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    if not (math.isfinite(u) and math.isfinite(dt)):
        raise NumericsError("non-finite dynamics input")
    return VehicleState(x.s + x.v * dt + 0.5 * u * dt * dt, x.v + u * dt)


def stage_cost(x: VehicleState, u: float, w: CostWeights) -> float:
    """l(x, u) = q_v (v - v_ref)^2 + r_u u^2."""
    dv = x.v - w.v_ref
    return w.q_v * dv * dv + w.r_u * u * u


def terminal_cost(x: VehicleState, w: CostWeights) -> float:
    """l_F(x) = q_f (v - v_ref)^2."""
    dv = x.v - w.v_ref
    return w.q_f * dv * dv


# -- scenario configuration --------------------------------------------------


def _pair(v, name: str) -> tuple:
    t = tuple(float(x) for x in v)
    if len(t) != 2 or t[0] > t[1]:
        raise ConfigError(f"{name} must be a (lo, hi) pair with lo <= hi")
    return t


@dataclass
class ScenarioConfig:
    """Complete description of a two-vehicle interaction scenario.

    Serializable to/from JSON (see docs/config.md for the schema and the
    shipped presets). All solver and smoothing knobs are deliberately
    config-surfaced so experiments never require code edits.
    """

    ego_path: PathSpec
    opp_path: PathSpec
    name: str = "custom"
    d_safe: float = 2.0
    dt: float = 0.05
    horizon: int = 15
    branch_horizon: int = 2
    branching: int = 2
    u_min: float = -4.0
    u_max: float = 4.0
    uo_min: float = -4.0
    uo_max: float = 4.0
    weights: CostWeights = field(default_factory=CostWeights)
    behavior: "BehaviorParams" = None  # filled in __post_init__
    ego_s0: tuple = (0.0, 10.0)
    ego_v0: tuple = (7.0, 10.0)
    opp_s0: tuple = (0.0, 10.0)
    opp_v0: tuple = (6.0, 9.0)
    arrival_window: Optional[float] = 1.0  # s; couples sampled arrival times
    seed: int = 0
    b0: tuple = (0.5, 0.5)
    belief_floor: float = 1e-6
    ego_goal_s: Optional[float] = None  # None: conflict arc + goal_margin
    goal_margin: float = 15.0
    time_cap: float = 15.0
    # solver
    tol_feas: float = 1e-6
    tol_opt: float = 1e-4
    max_iter: int = 80
    slack_penalty: float = 1e4
    tree_cap: int = 2047  # node-count guard for build_topology
    nlp_margin: float = 0.2  # m, extra clearance required inside NLPs only
    margin_growth: float = 0.35  # m/s of node depth, prediction-spread price
    # smoothing used inside NLPs only
    dint_blend: float = 0.5  # m, logistic width of the interaction switch
    corner_width: float = 0.5  # m, softplus blend at path corners
    clamp_width: float = 0.1  # m/s^2, smooth input clamp width
    vfloor_width: float = 0.1  # m/s, smooth width of the standstill floor
    eps_dist: float = 1e-6  # m, smooth-norm regularizer
    # controller knobs
    c_explore: float = 0.05  # info-gain weight of the explicit dual
    gain_belief: str = "fixed"  # fixed | propagated
    nonreactive_scheme: str = "sigma-point"  # sigma-point | random
    reactive_scheme: str = "max-likelihood"  # max-likelihood | random

    def __post_init__(self):
        if self.behavior is None:
            from .opponent import BehaviorParams

            self.behavior = BehaviorParams()
        if not (0 < self.branch_horizon < self.horizon):
            raise ConfigError("need 0 < branch_horizon < horizon")
        if self.dt <= 0.0:
            raise ConfigError("dt must be positive")
        if not (self.u_min < 0.0 < self.u_max):
            raise ConfigError("ego input bounds must straddle zero")
        if not (self.uo_min < 0.0 < self.uo_max):
            raise ConfigError("opponent input bounds must straddle zero")
        if self.d_safe <= 0.0:
            raise ConfigError("d_safe must be positive")
        if self.gain_belief not in ("fixed", "propagated"):
            raise ConfigError("gain_belief must be 'fixed' or 'propagated'")
        self.ego_s0 = _pair(self.ego_s0, "ego_s0")
        self.ego_v0 = _pair(self.ego_v0, "ego_v0")
        self.opp_s0 = _pair(self.opp_s0, "opp_s0")
        self.opp_v0 = _pair(self.opp_v0, "opp_v0")
        self.b0 = tuple(float(x) for x in self.b0)
        self._conflict = None

    # conflict geometry ------------------------------------------------

    def conflict_point(self) -> tuple:
        """(s_e*, s_o*, min distance): arc pair minimizing inter-path distance.

        Dense grid search followed by local refinement; ties broken toward the
        smallest arc positions so shared downstream segments (ramp merges)
        resolve to the first point of contact.
        """
        if self._conflict is None:
            self._conflict = _min_distance_pair(self.ego_path, self.opp_path)
        return self._conflict

    @property
    def goal_s(self) -> float:
        if self.ego_goal_s is not None:
            return float(self.ego_goal_s)
        return self.conflict_point()[0] + self.goal_margin

    # serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "ego_path": self.ego_path.to_dict(),
            "opp_path": self.opp_path.to_dict(),
            "weights": asdict(self.weights),
            "behavior": self.behavior.to_dict(),
        }
        scalar_keys = [
            "d_safe", "dt", "horizon", "branch_horizon", "branching",
            "u_min", "u_max", "uo_min", "uo_max",
            "ego_s0", "ego_v0", "opp_s0", "opp_v0", "arrival_window",
            "seed", "b0", "belief_floor", "ego_goal_s", "goal_margin",
            "time_cap", "tol_feas", "tol_opt", "max_iter", "slack_penalty",
            "tree_cap", "nlp_margin", "margin_growth", "dint_blend",
            "corner_width", "clamp_width",
            "vfloor_width", "eps_dist", "c_explore", "gain_belief",
            "nonreactive_scheme", "reactive_scheme",
        ]
        for k in scalar_keys:
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        from .opponent import BehaviorParams

        d = dict(d)
        try:
            ego = PathSpec.from_dict(d.pop("ego_path"))
            opp = PathSpec.from_dict(d.pop("opp_path"))
        except KeyError as e:
            raise ConfigError(f"scenario config missing field {e}") from None
        kw = {}
        if "weights" in d:
            kw["weights"] = CostWeights(**d.pop("weights"))
        if "behavior" in d:
            kw["behavior"] = BehaviorParams.from_dict(d.pop("behavior"))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario config fields: {sorted(unknown)}")
        kw.update(d)
        return cls(ego_path=ego, opp_path=opp, **kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        """Stable hash of the canonical JSON form, for output headers."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def safety_margin(ego: VehicleState, opp: VehicleState, cfg: ScenarioConfig) -> float:
    """h = ||p_e - p_o|| - d_safe; nonnegative means safe."""
    pe = cfg.ego_path.position(ego.s)
    po = cfg.opp_path.position(opp.s)
    return float(np.hypot(*(pe - po))) - cfg.d_safe


def paths_interact(cfg: ScenarioConfig) -> bool:
    """True iff the two paths come within d_safe of each other anywhere."""
    return cfg.conflict_point()[2] < cfg.d_safe


def _min_distance_pair(pa: PathSpec, pb: PathSpec, coarse: float = 0.5) -> tuple:
    sa = np.arange(0.0, pa.total_length + coarse, coarse)
    sb = np.arange(0.0, pb.total_length + coarse, coarse)
    qa = pa.positions(sa)
    qb = pb.positions(sb)
    d2 = ((qa[:, None, :] - qb[None, :, :]) ** 2).sum(axis=2)
    best = np.min(d2)
    # first index pair within tolerance of the minimum: earliest contact
    ia, ib = np.argwhere(d2 <= best + 1e-12)[0]
    lo_a, hi_a = max(sa[ia] - coarse, 0.0), min(sa[ia] + coarse, pa.total_length)
    lo_b, hi_b = max(sb[ib] - coarse, 0.0), min(sb[ib] + coarse, pb.total_length)
    fa = np.linspace(lo_a, hi_a, 201)
    fb = np.linspace(lo_b, hi_b, 201)
    qa = pa.positions(fa)
    qb = pb.positions(fb)
    d2 = ((qa[:, None, :] - qb[None, :, :]) ** 2).sum(axis=2)
    best = np.min(d2)
    ia, ib = np.argwhere(d2 <= best + 1e-12)[0]
    return float(fa[ia]), float(fb[ib]), float(np.sqrt(best))


def smooth_path_params(path: PathSpec) -> tuple:
    """Arrays for the C-infinity path map used inside NLP kernels.

    T(s) = P0 + dir_0 * s + sum_j (dir_j - dir_{j-1}) * w * softplus((s - c_j)/w)
    with corner arc positions c_j. Exactly affine away from corners, blended
    over width w near them; coincides with the extended piecewise-linear map
    to within w*ln(2)*|ddir| at the corners.

    Returns (p0, dirs, corners) with dirs shape (m, 2), corners shape (m-1,).
    """
    return path.waypoints[0].copy(), path.dirs.copy(), path.cum_len[1:-1].copy()


def load_preset(name: str) -> ScenarioConfig:
    """Load a shipped scenario preset by name (e.g. 'ramp_merge')."""
    fn = name if name.endswith(".json") else f"{name}.json"
    ref = resources.files("mpcswitch").joinpath("presets", fn)
    try:
        text = ref.read_text()
    except FileNotFoundError:
        raise ConfigError(f"no preset named {name!r}") from None
    return ScenarioConfig.from_dict(json.loads(text))
