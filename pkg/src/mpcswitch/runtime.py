"""Closed-loop simulation, the switching controller, metrics, and Monte Carlo.

Episodes are fully determined by (config, agent, theta_true, seed): initial
conditions and the opponent noise stream derive from per-purpose children of
one seed sequence, so matched-seed comparisons across controllers see the
same scenario. Wall-clock timings live only in memory and in sidecar
summaries, never in trace or table files, keeping those byte-reproducible.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .belief import Belief, bayes_update, estimate_input
from .controllers import Controller, ControllerLevel, MpcSolution, build_controller
from .errors import ConfigError, ModelError
from .opponent import sample_input
from .world import ScenarioConfig, VehicleState, safety_margin, stage_cost

log = logging.getLogger(__name__)

TRACE_FORMAT = 1


@dataclass
class EpisodeTrace:
    """Executed closed-loop history on the uniform dt grid.

    State arrays hold n_steps+1 entries (every visited state, final state
    included); action-indexed arrays hold n_steps entries. wall_time is
    in-memory diagnostics only: serialization drops it so identical seeds
    produce identical files.
    """

    t: np.ndarray
    ego_s: np.ndarray
    ego_v: np.ndarray
    opp_s: np.ndarray
    opp_v: np.ndarray
    belief: np.ndarray      # (n_steps+1, n_theta), belief held at each time
    h: np.ndarray           # executed safety margin at each state
    u_ego: np.ndarray
    u_opp: np.ndarray
    level: np.ndarray       # active controller level per step
    wall_time: np.ndarray
    status: tuple           # solver status per step
    theta_true: float
    seed_key: str
    config_hash: str
    completed: bool
    timeout: bool
    escalations: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.u_ego)

    def to_jsonl(self) -> str:
        """Deterministic JSON-lines form: one meta line, one line per step,
        one terminal state line. Timing is deliberately omitted."""
        meta = {
            "type": "meta", "format": TRACE_FORMAT,
            "theta_true": self.theta_true, "seed_key": self.seed_key,
            "config_hash": self.config_hash, "completed": self.completed,
            "timeout": self.timeout, "n_steps": self.n_steps,
            "escalations": self.escalations,
        }
        lines = [json.dumps(meta, sort_keys=True)]
        for k in range(self.n_steps + 1):
            rec = {
                "t": round(float(self.t[k]), 9),
                "ego_s": float(self.ego_s[k]), "ego_v": float(self.ego_v[k]),
                "opp_s": float(self.opp_s[k]), "opp_v": float(self.opp_v[k]),
                "belief": [float(x) for x in self.belief[k]],
                "h": float(self.h[k]),
            }
            if k < self.n_steps:
                rec["u_ego"] = float(self.u_ego[k])
                rec["u_opp"] = float(self.u_opp[k])
                rec["level"] = int(self.level[k])
                rec["status"] = self.status[k]
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeTrace":
        """Inverse of to_jsonl; wall times come back as zeros."""
        lines = [json.loads(s) for s in text.splitlines() if s.strip()]
        if not lines or lines[0].get("type") != "meta":
            raise ModelError("trace stream does not start with a meta line")
        meta = lines[0]
        if meta.get("format") != TRACE_FORMAT:
            raise ModelError(f"unsupported trace format {meta.get('format')}")
        n = int(meta["n_steps"])
        recs = lines[1:]
        if len(recs) != n + 1:
            raise ModelError(f"trace has {len(recs)} step lines, meta "
                             f"promises {n + 1}")
        steps = recs[:-1]
        return cls(
            t=np.array([r["t"] for r in recs]),
            ego_s=np.array([r["ego_s"] for r in recs]),
            ego_v=np.array([r["ego_v"] for r in recs]),
            opp_s=np.array([r["opp_s"] for r in recs]),
            opp_v=np.array([r["opp_v"] for r in recs]),
            belief=np.array([r["belief"] for r in recs]),
            h=np.array([r["h"] for r in recs]),
            u_ego=np.array([r["u_ego"] for r in steps]),
            u_opp=np.array([r["u_opp"] for r in steps]),
            level=np.array([r["level"] for r in steps], dtype=np.int64),
            wall_time=np.zeros(n),
            status=tuple(r["status"] for r in steps),
            theta_true=float(meta["theta_true"]),
            seed_key=str(meta["seed_key"]),
            config_hash=str(meta["config_hash"]),
            completed=bool(meta["completed"]),
            timeout=bool(meta["timeout"]),
            escalations=int(meta.get("escalations", 0)),
        )


@dataclass
class RunMetrics:
    """Per-episode summary mirroring the evaluation table's columns."""

    collided: bool
    min_distance: float
    front_merge: bool
    completion_time: float
    timeout: bool
    max_abs_acc: float
    control_effort: float
    trajectory_cost: float
    mean_step_time: float
    total_step_time: float
    usage: dict = field(default_factory=dict)  # level -> fraction of steps
    escalations: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["usage"] = {str(k): v for k, v in self.usage.items()}
        return d


class Switcher:
    """Situation-aware switching controller.

    Per step: build the feature vector from (ego, opp, belief), predict
    controller probabilities with the classifier, pick the argmax (ties to
    the lowest level), and run that candidate. A failed solve escalates one
    level at a time; if the highest candidate also fails the step falls back
    to maximal braking and is flagged.
    """

    def __init__(self, model, cfg: ScenarioConfig,
                 candidate_levels: Sequence[int] = (1, 3, 5)) -> None:
        levels = sorted(int(x) for x in candidate_levels)
        if len(levels) != len(set(levels)):
            raise ConfigError("duplicate candidate levels")
        self.model = model
        self.cfg = cfg
        self.candidates = [build_controller(lv, cfg) for lv in levels]
        self.last_level: int = levels[0]
        self.escalations: int = 0

    @property
    def level(self) -> int:
        return self.last_level

    def reset(self) -> None:
        for c in self.candidates:
            c.reset()
        self.escalations = 0

    def act(self, ego: VehicleState, opp: VehicleState, belief: Belief,
            u_o_estimate: float = 0.0):
        u0, lvl, diag = switch_act(ego, opp, belief, self.model,
                                   self.candidates, u_o_estimate)
        self.last_level = lvl
        self.escalations += diag.get("escalated", 0)
        return u0, diag["solution"]


def switch_act(ego: VehicleState, opp: VehicleState, b: Belief, model,
               candidates: Sequence[Controller], u_o_estimate: float = 0.0):
    """One switching-controller step: predict, select, solve, return input.

    Returns (u0, chosen level, diagnostics). candidates must be ordered by
    ascending ControllerLevel; `model` must output one probability per
    candidate.
    """
    from .classifier import forward

    z = np.concatenate([[ego.s, ego.v, opp.s, opp.v], b.as_array()])
    pi = forward(model, z)
    if len(pi) != len(candidates):
        raise ModelError(f"model predicts {len(pi)} candidates, "
                         f"got {len(candidates)}")
    idx = int(np.argmax(pi))  # argmax takes the first (lowest) on ties
    diag = {"pi": pi, "selected": idx, "escalated": 0}
    for j in range(idx, len(candidates)):
        u0, sol = candidates[j].act(ego, opp, b, u_o_estimate)
        if sol.status != "fallback":
            diag["solution"] = sol
            if j > idx:
                diag["escalated"] = j - idx
                log.warning("switcher escalated from level %s to %s",
                            candidates[idx].level, candidates[j].level)
            return u0, int(candidates[j].level), diag
    log.warning("all switch candidates failed; applying maximal braking")
    cfg = candidates[-1].cfg
    diag["solution"] = MpcSolution(
        inputs=np.array([cfg.u_min]), u0=cfg.u_min, objective=float("inf"),
        status="fallback", iterations=0, wall_time=0.0, slack=float("inf"),
        max_violation=float("inf"))
    diag["escalated"] = len(candidates) - idx
    return cfg.u_min, int(candidates[-1].level), diag


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def sample_initial_conditions(cfg: ScenarioConfig, rng: np.random.Generator):
    """Draw (ego0, opp0) from the configured ranges.

    With arrival_window set, draws are rejection-sampled until the two
    unforced (constant-speed) arrival times at the conflict point fall
    within that window of each other; this concentrates sampling on
    actually interacting encounters without distorting who arrives first.
    After 256 rejected draws the closest pair seen is returned.
    """
    s_e, s_o, _ = cfg.conflict_point()
    best = None
    best_gap = math.inf
    for _ in range(256):
        ego_s = rng.uniform(*cfg.ego_s0)
        ego_v = rng.uniform(*cfg.ego_v0)
        opp_s = rng.uniform(*cfg.opp_s0)
        opp_v = rng.uniform(*cfg.opp_v0)
        if cfg.arrival_window is None:
            break
        t_e = (s_e - ego_s) / max(ego_v, 0.1)
        t_o = (s_o - opp_s) / max(opp_v, 0.1)
        gap = abs(t_e - t_o)
        if gap <= cfg.arrival_window:
            break
        if gap < best_gap:
            best_gap = gap
            best = (ego_s, ego_v, opp_s, opp_v)
    else:
        ego_s, ego_v, opp_s, opp_v = best
    return VehicleState(ego_s, ego_v), VehicleState(opp_s, opp_v)


def run_episode(cfg: ScenarioConfig, agent, theta_true: float, seed,
                ego0: Optional[VehicleState] = None,
                opp0: Optional[VehicleState] = None,
                b0: Optional[Belief] = None,
                max_steps: Optional[int] = None) -> EpisodeTrace:
    """Simulate one closed-loop episode.

    agent is a Controller or Switcher (anything with act/reset/level). The
    loop runs until the ego passes the episode goal arc or the time cap
    expires; max_steps truncates earlier (used by labeling rollouts).
    Belief updates use the exact input recovered from consecutive opponent
    speeds. Identical (cfg, agent kind, theta_true, seed) inputs produce
    identical traces.
    """
    params = cfg.behavior
    if float(theta_true) not in params.theta_set:
        raise ConfigError(f"theta_true {theta_true} not in theta_set")
    ss = _seed_sequence(seed)
    ic_seq, noise_seq = ss.spawn(2)
    if ego0 is None or opp0 is None:
        e0, o0 = sample_initial_conditions(cfg, np.random.default_rng(ic_seq))
        ego0 = ego0 if ego0 is not None else e0
        opp0 = opp0 if opp0 is not None else o0
    noise_rng = np.random.default_rng(noise_seq)

    agent.reset()
    ego, opp = ego0, opp0
    b = b0 if b0 is not None else Belief(cfg.b0, floor=cfg.belief_floor)
    goal = cfg.goal_s
    truncated = max_steps is not None
    max_steps = int(max_steps) if truncated else int(round(cfg.time_cap / cfg.dt))

    cols = {k: [] for k in ("t", "es", "ev", "os", "ov", "bl", "h",
                            "ue", "uo", "lv", "wt", "st")}
    u_o_est = 0.0
    completed = False
    k = 0
    while k < max_steps:
        if ego.s >= goal:
            completed = True
            break
        cols["t"].append(k * cfg.dt)
        cols["es"].append(ego.s)
        cols["ev"].append(ego.v)
        cols["os"].append(opp.s)
        cols["ov"].append(opp.v)
        cols["bl"].append(b.as_array())
        cols["h"].append(safety_margin(ego, opp, cfg))

        t0 = time.perf_counter()
        u_e, sol = agent.act(ego, opp, b, u_o_est)
        cols["wt"].append(time.perf_counter() - t0)
        cols["lv"].append(int(agent.level))
        cols["st"].append(sol.status)
        u_o = sample_input(params, theta_true, opp, ego, cfg, noise_rng)

        ego_next = VehicleState(ego.s + ego.v * cfg.dt + 0.5 * u_e * cfg.dt ** 2,
                                ego.v + u_e * cfg.dt)
        opp_next = VehicleState(opp.s + opp.v * cfg.dt + 0.5 * u_o * cfg.dt ** 2,
                                opp.v + u_o * cfg.dt)
        u_o_est = estimate_input(opp_next.v, opp.v, cfg.dt)
        b = bayes_update(b, u_o_est, opp, ego, params, cfg)
        cols["ue"].append(u_e)
        cols["uo"].append(u_o)
        ego, opp = ego_next, opp_next
        k += 1
    else:
        completed = ego.s >= goal

    # terminal state record
    cols["t"].append(k * cfg.dt)
    cols["es"].append(ego.s)
    cols["ev"].append(ego.v)
    cols["os"].append(opp.s)
    cols["ov"].append(opp.v)
    cols["bl"].append(b.as_array())
    cols["h"].append(safety_margin(ego, opp, cfg))

    timeout = not completed
    if timeout and not truncated:
        log.warning("episode hit the %.1f s time cap before completion",
                    cfg.time_cap)
    return EpisodeTrace(
        t=np.asarray(cols["t"]), ego_s=np.asarray(cols["es"]),
        ego_v=np.asarray(cols["ev"]), opp_s=np.asarray(cols["os"]),
        opp_v=np.asarray(cols["ov"]), belief=np.asarray(cols["bl"]),
        h=np.asarray(cols["h"]), u_ego=np.asarray(cols["ue"]),
        u_opp=np.asarray(cols["uo"]), level=np.asarray(cols["lv"], dtype=int),
        wall_time=np.asarray(cols["wt"]), status=tuple(cols["st"]),
        theta_true=float(theta_true), seed_key=repr(_entropy_key(ss)),
        config_hash=cfg.config_hash(), completed=completed, timeout=timeout,
        escalations=int(getattr(agent, "escalations", 0)),
    )


def _entropy_key(ss: np.random.SeedSequence):
    e = ss.entropy
    return tuple(e) if isinstance(e, (list, tuple)) else e


def compute_metrics(trace: EpisodeTrace, cfg: ScenarioConfig) -> RunMetrics:
    """Reduce one trace to the evaluation table's scalar columns.

    front_merge means the ego's arc position passes its conflict arc at a
    strictly earlier step than the opponent passes its own; a tied step or
    an opponent-first crossing counts as no front merge.
    """
    s_e_conf, s_o_conf, _ = cfg.conflict_point()
    cross_e = np.nonzero(trace.ego_s >= s_e_conf)[0]
    cross_o = np.nonzero(trace.opp_s >= s_o_conf)[0]
    if len(cross_e) == 0:
        front = False
    elif len(cross_o) == 0:
        front = True
    else:
        front = int(cross_e[0]) < int(cross_o[0])

    goal_idx = np.nonzero(trace.ego_s >= cfg.goal_s)[0]
    if len(goal_idx):
        completion = float(trace.t[goal_idx[0]])
    else:
        completion = float(trace.t[-1])

    n_steps = max(trace.n_steps, 1)
    levels, counts = np.unique(trace.level, return_counts=True) \
        if trace.n_steps else (np.array([], dtype=int), np.array([], dtype=int))
    usage = {int(l): float(c) / n_steps for l, c in zip(levels, counts)}

    traj = 0.0
    for k in range(trace.n_steps):
        traj += stage_cost(VehicleState(trace.ego_s[k], trace.ego_v[k]),
                           float(trace.u_ego[k]), cfg.weights)

    return RunMetrics(
        collided=bool(np.min(trace.h) < 0.0),
        min_distance=float(np.min(trace.h) + cfg.d_safe),
        front_merge=front,
        completion_time=completion,
        timeout=trace.timeout,
        max_abs_acc=float(np.max(np.abs(trace.u_ego))) if trace.n_steps else 0.0,
        control_effort=float(np.sum(trace.u_ego ** 2)),
        trajectory_cost=traj,
        mean_step_time=float(np.mean(trace.wall_time)) if trace.n_steps else 0.0,
        total_step_time=float(np.sum(trace.wall_time)),
        usage=usage,
        escalations=trace.escalations,
    )


# -- Monte Carlo ---------------------------------------------------------------

_MEAN_STD_FIELDS = ("min_distance", "completion_time", "max_abs_acc",
                    "control_effort", "trajectory_cost")
_LEVELS = tuple(int(l) for l in ControllerLevel)


def make_agent(spec, cfg: ScenarioConfig, model=None):
    """Agent from a controller spec: an int level 1-5 or 'switch'."""
    if isinstance(spec, str) and spec.lower() == "switch":
        if model is None:
            raise ConfigError("'switch' agent needs a trained model")
        return Switcher(model, cfg)
    try:
        return build_controller(int(spec), cfg)
    except (TypeError, ValueError):
        raise ConfigError(f"controller spec must be 1-5 or 'switch', "
                          f"got {spec!r}") from None


def agent_key(spec) -> str:
    if isinstance(spec, str) and spec.lower() == "switch":
        return "switch"
    return str(int(spec))


@dataclass
class MonteCarloResult:
    """Aggregated matched-seed Monte Carlo metrics per controller."""

    cfg_hash: str
    seed: int
    n_per_theta: int
    controllers: tuple
    episodes: dict       # key -> list of (theta, ep_index, RunMetrics)
    traces: dict         # key -> list of EpisodeTrace, only if kept

    def rows(self) -> list:
        out = []
        for key in self.controllers:
            ms = [m for _, _, m in self.episodes[key]]
            n = len(ms)
            row = {"controller": key, "runs": n}
            row["safety_rate"] = 1.0 - sum(m.collided for m in ms) / n
            row["front_merge_rate"] = sum(m.front_merge for m in ms) / n
            row["timeout_rate"] = sum(m.timeout for m in ms) / n
            for f in _MEAN_STD_FIELDS:
                vals = np.array([getattr(m, f) for m in ms])
                row[f + "_mean"] = float(vals.mean())
                row[f + "_std"] = float(vals.std())
            for lv in _LEVELS:
                row[f"usage_{lv}"] = float(
                    np.mean([m.usage.get(lv, 0.0) for m in ms]))
            out.append(row)
        return out

    def timing(self) -> dict:
        """Wall-clock summary (sidecar material, never in the CSV)."""
        out = {}
        for key in self.controllers:
            ms = [m for _, _, m in self.episodes[key]]
            out[key] = {
                "mean_step_time": float(np.mean([m.mean_step_time for m in ms])),
                "total_time": float(np.sum([m.total_step_time for m in ms])),
            }
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        cols = list(rows[0].keys())
        lines = [f"# config_hash={self.cfg_hash} seed={self.seed} "
                 f"n_per_theta={self.n_per_theta}", ",".join(cols)]
        for r in rows:
            lines.append(",".join(
                f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c])
                for c in cols))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "config_hash": self.cfg_hash, "seed": self.seed,
            "n_per_theta": self.n_per_theta, "rows": self.rows(),
        }, indent=2, sort_keys=True)


def _episode_seed(root_seed: int, theta_idx: int, ep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=(int(root_seed), theta_idx, ep))


def _run_one(args):
    cfg_dict, spec, model, theta_idx, ep, root_seed, keep = args
    cfg = ScenarioConfig.from_dict(cfg_dict)
    theta = cfg.behavior.theta_set[theta_idx]
    agent = make_agent(spec, cfg, model)
    trace = run_episode(cfg, agent, theta, _episode_seed(root_seed, theta_idx, ep))
    return (agent_key(spec), theta, ep, compute_metrics(trace, cfg),
            trace if keep else None)


def monte_carlo(cfg: ScenarioConfig, controllers: Sequence, n_per_theta: int,
                seed: int, model=None, jobs: int = 1,
                keep_traces: bool = False) -> MonteCarloResult:
    """Matched-seed Monte Carlo over all controllers and both hypotheses.

    Every controller sees the same (initial condition, opponent noise
    stream) per (theta, episode index); episode seeds split from the root
    seed by index, so results are independent of execution order and of
    `jobs`. Failures inside an episode propagate as that episode's metrics
    (safety fallback engaged), never as harness crashes.
    """
    if n_per_theta < 1:
        raise ConfigError("n_per_theta must be >= 1")
    keys = [agent_key(s) for s in controllers]
    if len(set(keys)) != len(keys):
        raise ConfigError("duplicate controllers in Monte Carlo list")
    cfg_dict = cfg.to_dict()
    work = []
    for spec in controllers:
        for theta_idx in range(len(cfg.behavior.theta_set)):
            for ep in range(n_per_theta):
                work.append((cfg_dict, spec, model, theta_idx, ep, seed,
                             keep_traces))
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work, chunksize=4))
    else:
        for w in work:
            results.append(_run_one(w))

    episodes = {k: [] for k in keys}
    traces = {k: [] for k in keys}
    for key, theta, ep, metrics, trace in results:
        episodes[key].append((theta, ep, metrics))
        if trace is not None:
            traces[key].append(trace)
    for key in keys:  # stable order independent of pool scheduling
        episodes[key].sort(key=lambda r: (r[0], r[1]))
    return MonteCarloResult(
        cfg_hash=cfg.config_hash(), seed=int(seed), n_per_theta=n_per_theta,
        controllers=tuple(keys), episodes=episodes, traces=traces,
    )
