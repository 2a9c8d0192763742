"""Interactive MPC hierarchy with a learned switching controller.

Five model-predictive controllers of increasing interaction awareness
(robust, non-reactive branch, reactive branch, explicit dual, implicit dual)
for two-vehicle longitudinal interaction, plus Bayesian intent inference and
a classifier that switches to the cheapest near-optimal controller per step.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ModelError, MpcSwitchError, NumericsError
from .world import (
    CostWeights,
    PathSpec,
    ScenarioConfig,
    VehicleState,
    load_preset,
    paths_interact,
    position_on_path,
    safety_margin,
    stage_cost,
    step_dynamics,
    terminal_cost,
)
from .opponent import BehaviorParams, likelihood, mean_input, sample_input
from .belief import Belief, bayes_update, estimate_input
from .tree import (
    NodeSamples,
    NodeWeights,
    TreeTopology,
    assign_nonreactive,
    assign_reactive,
    build_topology,
    node_weights,
)
from .controllers import (
    Controller,
    ControllerLevel,
    MpcSolution,
    NlpProblem,
    build_controller,
    info_gain,
    solve_branch_nonreactive,
    solve_branch_reactive,
    solve_dual_explicit,
    solve_dual_implicit,
    solve_nlp,
    solve_robust,
)
from .classifier import (
    Dataset,
    LabeledSample,
    MlpModel,
    forward,
    gen_dataset,
    label_scenario,
    load_model,
    save_model,
    train,
    weighted_loss,
)
from .runtime import (
    EpisodeTrace,
    MonteCarloResult,
    RunMetrics,
    Switcher,
    compute_metrics,
    make_agent,
    monte_carlo,
    run_episode,
    switch_act,
)
from .report import render_montecarlo_figure, render_trace_figure

__all__ = [
    "BehaviorParams", "Belief", "ConfigError", "Controller",
    "ControllerLevel", "CostWeights", "Dataset", "EpisodeTrace",
    "LabeledSample", "MlpModel", "ModelError", "MonteCarloResult",
    "MpcSolution", "MpcSwitchError", "NlpProblem", "NodeSamples",
    "NodeWeights", "NumericsError", "PathSpec", "RunMetrics",
    "ScenarioConfig", "Switcher", "TreeTopology", "VehicleState",
    "assign_nonreactive", "assign_reactive", "bayes_update",
    "build_controller", "build_topology", "compute_metrics",
    "estimate_input", "forward", "gen_dataset", "info_gain",
    "label_scenario", "likelihood", "load_model", "load_preset",
    "make_agent", "mean_input", "monte_carlo", "node_weights",
    "paths_interact", "position_on_path", "render_montecarlo_figure",
    "render_trace_figure", "run_episode", "safety_margin",
    "sample_input", "save_model", "solve_branch_nonreactive",
    "solve_branch_reactive", "solve_dual_explicit", "solve_dual_implicit",
    "solve_nlp", "solve_robust", "stage_cost", "step_dynamics",
    "switch_act", "terminal_cost", "train", "weighted_loss",
    "__version__",
]
