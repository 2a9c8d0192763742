"""Belief over the latent driving-style parameter and its Bayesian update."""

from __future__ import annotations

import logging

import numpy as np

from .errors import ConfigError
from .opponent import BehaviorParams, log_likelihood
from .world import ScenarioConfig, VehicleState

log = logging.getLogger(__name__)

_UNDERFLOW = 1e-300


class Belief:
    """Probability vector over theta_set with a small floor.

    The floor (cfg.belief_floor, default 1e-6) is applied after normalization
    and the vector renormalized, so no hypothesis ever becomes an absorbing
    zero and the dual controllers can recover from early mis-inference.
    """

    __slots__ = ("probs",)

    def __init__(self, probs, floor: float = 1e-6) -> None:
        p = np.asarray(probs, dtype=float).copy()
        if p.ndim != 1 or len(p) < 2:
            raise ConfigError("belief needs at least two hypotheses")
        if np.any(p < 0.0) or not np.all(np.isfinite(p)) or p.sum() <= 0.0:
            raise ConfigError("belief entries must be nonnegative and finite")
        p /= p.sum()
        p = np.maximum(p, floor)
        p /= p.sum()
        self.probs = p

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, i: int) -> float:
        return float(self.probs[i])

    def __repr__(self) -> str:
        return f"Belief({np.array2string(self.probs, precision=4)})"

    def as_array(self) -> np.ndarray:
        return self.probs.copy()


def estimate_input(v_next: float, v_now: float, dt: float) -> float:
    """Recover the applied acceleration from consecutive speeds.

    Exact under the zero-order-hold dynamics: (v' - v)/dt = u.
    """
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    return (v_next - v_now) / dt


def bayes_from_logliks(b: Belief, logliks: np.ndarray, floor: float = 1e-6) -> Belief:
    """Closed-form posterior b'(theta) proportional to exp(loglik) * b(theta).

    This is the single update expression shared by the simulator-side update
    below and the symbolic per-node belief recursion inside the dual NLPs
    (the kernels inline the same formula for two hypotheses).
    """
    ll = np.asarray(logliks, dtype=float)
    masses = b.probs * np.exp(ll - np.max(ll))
    total = masses.sum()
    if not np.isfinite(total) or total < _UNDERFLOW:
        log.warning("degenerate observation: all likelihood masses underflow; "
                    "belief left unchanged")
        return Belief(b.probs, floor=floor)
    return Belief(masses / total, floor=floor)


def bayes_update(b: Belief, u_tilde: float, opp: VehicleState, ego: VehicleState,
                 params: BehaviorParams, cfg: ScenarioConfig) -> Belief:
    """Bayes update of the belief from one observed opponent input.

    Likelihoods are evaluated at the states where the input was applied.
    Outside the interaction distance the policy is theta-independent, so the
    update is a no-op there by construction.
    """
    ll = np.array([log_likelihood(params, th, u_tilde, opp, ego, cfg)
                   for th in params.theta_set])
    return bayes_from_logliks(b, ll, floor=cfg.belief_floor)
