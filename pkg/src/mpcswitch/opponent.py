"""Stochastic opponent behavior model with a latent driving-style parameter.

The opponent's acceleration is Gaussian around a state-dependent mean: inside
the interaction distance it tracks the ego speed offset by theta * delta_v
(theta = -1 cautious, +1 aggressive by default), otherwise it tracks its own
cruising speed. The same model serves as simulation ground truth and as the
prediction/likelihood model inside the controllers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ModelError
from .world import ScenarioConfig, VehicleState

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BehaviorParams:
    """Parameters of the opponent policy distribution."""

    k_gain: float = 1.0      # proportional gain, 1/s
    delta_v: float = 2.0     # speed adjustment, m/s
    d_int: float = 10.0      # interaction distance, m
    v_star: float = 8.0      # cruising speed, m/s
    sigma: float = 0.5       # input noise std, m/s^2
    theta_set: tuple = (-1.0, 1.0)  # cautious first, aggressive second

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ConfigError("sigma must be positive")
        if self.d_int <= 0.0:
            raise ConfigError("d_int must be positive")
        if len(self.theta_set) == 0 or len(set(self.theta_set)) != len(self.theta_set):
            raise ConfigError("theta_set must be nonempty with distinct values")
        object.__setattr__(self, "theta_set", tuple(float(t) for t in self.theta_set))

    def to_dict(self) -> dict:
        return {
            "k_gain": self.k_gain, "delta_v": self.delta_v, "d_int": self.d_int,
            "v_star": self.v_star, "sigma": self.sigma,
            "theta_set": list(self.theta_set),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorParams":
        d = dict(d)
        if "theta_set" in d:
            d["theta_set"] = tuple(d["theta_set"])
        return cls(**d)


def _check_theta(params: BehaviorParams, theta: float) -> None:
    if float(theta) not in params.theta_set:
        raise ModelError(f"theta {theta} not in theta_set {params.theta_set}")


def mean_input(params: BehaviorParams, theta: float, opp: VehicleState,
               ego: VehicleState, cfg: ScenarioConfig) -> float:
    """Mean opponent acceleration for latent value theta, clamped to U^o.

    K (max(v_e + theta delta_v, 0) - v_o) inside d_int,
    K (v_star - v_o) outside. The speed target is floored at standstill: a
    yielding driver slows to a stop, never aims to reverse. The distance
    switch is exact (discontinuous) here; NLPs use smoothed variants of the
    switch and the floor internally.
    """
    _check_theta(params, theta)
    pe = cfg.ego_path.position(ego.s)
    po = cfg.opp_path.position(opp.s)
    dist = math.hypot(pe[0] - po[0], pe[1] - po[1])
    if dist <= params.d_int:
        target = max(ego.v + theta * params.delta_v, 0.0)
        u = params.k_gain * (target - opp.v)
    else:
        u = params.k_gain * (params.v_star - opp.v)
    return min(max(u, cfg.uo_min), cfg.uo_max)


def sample_input(params: BehaviorParams, theta: float, opp: VehicleState,
                 ego: VehicleState, cfg: ScenarioConfig,
                 rng: np.random.Generator) -> float:
    """Draw u^o ~ N(mean_input, sigma^2), clamped to U^o.

    Exactly one standard-normal draw is consumed per call, so matched-seed
    protocols see identical noise sequences regardless of the states passed.
    """
    xi = rng.standard_normal()
    u = mean_input(params, theta, opp, ego, cfg) + params.sigma * xi
    return min(max(u, cfg.uo_min), cfg.uo_max)


def likelihood(params: BehaviorParams, theta: float, u_tilde: float,
               opp: VehicleState, ego: VehicleState, cfg: ScenarioConfig) -> float:
    """Gaussian density of an observed input under the theta policy."""
    mu = mean_input(params, theta, opp, ego, cfg)
    z = (u_tilde - mu) / params.sigma
    return math.exp(-0.5 * z * z) / (params.sigma * _SQRT_2PI)


def log_likelihood(params: BehaviorParams, theta: float, u_tilde: float,
                   opp: VehicleState, ego: VehicleState, cfg: ScenarioConfig) -> float:
    mu = mean_input(params, theta, opp, ego, cfg)
    z = (u_tilde - mu) / params.sigma
    return -0.5 * z * z - math.log(params.sigma * _SQRT_2PI)
