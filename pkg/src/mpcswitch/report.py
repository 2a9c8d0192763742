"""Figure rendering for episode traces and Monte Carlo summaries.

Everything here draws from already-exported data structures (EpisodeTrace,
MonteCarloResult) so figures are a pure view: rerunning a command with
--figures never changes the delimited outputs. The Agg backend is forced so
rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .runtime import EpisodeTrace, MonteCarloResult
from .world import ScenarioConfig


def render_trace_figure(trace: EpisodeTrace, cfg: ScenarioConfig,
                        out_path: str) -> str:
    """Four-panel episode figure: geometry, speeds, inputs, belief/margin.

    Returns the path written. File type follows the extension (png/pdf/svg).
    """
    fig, axes = plt.subplots(2, 2, figsize=(11, 8))
    ax_map, ax_v, ax_u, ax_b = axes.flat

    ego_xy = cfg.ego_path.positions(trace.ego_s)
    opp_xy = cfg.opp_path.positions(trace.opp_s)
    wp_e = cfg.ego_path.waypoints
    wp_o = cfg.opp_path.waypoints
    ax_map.plot(wp_e[:, 0], wp_e[:, 1], "-", color="0.8", lw=5, zorder=0)
    ax_map.plot(wp_o[:, 0], wp_o[:, 1], "-", color="0.8", lw=5, zorder=0)
    step = max(1, trace.n_steps // 24)
    sc = ax_map.scatter(ego_xy[::step, 0], ego_xy[::step, 1],
                        c=trace.t[::step], cmap="viridis", s=22, label="ego")
    ax_map.scatter(opp_xy[::step, 0], opp_xy[::step, 1], c=trace.t[::step],
                   cmap="viridis", s=22, marker="s", label="opponent")
    s_e_conf, _, _ = cfg.conflict_point()
    conf_xy = cfg.ego_path.position(s_e_conf)
    ax_map.plot(conf_xy[0], conf_xy[1], "rx", ms=10, mew=2,
                label="conflict point")
    ax_map.set_xlabel("x [m]")
    ax_map.set_ylabel("y [m]")
    ax_map.set_aspect("equal", adjustable="datalim")
    ax_map.legend(loc="best", fontsize=8)
    fig.colorbar(sc, ax=ax_map, label="t [s]", shrink=0.85)

    ax_v.plot(trace.t, trace.ego_v, label="ego")
    ax_v.plot(trace.t, trace.opp_v, label="opponent")
    ax_v.axhline(cfg.weights.v_ref, color="0.6", ls=":", lw=1)
    ax_v.set_xlabel("t [s]")
    ax_v.set_ylabel("speed [m/s]")
    ax_v.legend(loc="best", fontsize=8)

    tu = trace.t[:-1]
    ax_u.step(tu, trace.u_ego, where="post", label="ego input")
    ax_u.step(tu, trace.u_opp, where="post", label="opponent input",
              alpha=0.7)
    if np.ptp(trace.level) > 0:
        ax2 = ax_u.twinx()
        ax2.step(tu, trace.level, where="post", color="tab:red", lw=1,
                 alpha=0.6)
        ax2.set_ylabel("active level", color="tab:red")
        ax2.set_yticks(sorted(set(trace.level.tolist())))
    ax_u.set_xlabel("t [s]")
    ax_u.set_ylabel("input [m/s$^2$]")
    ax_u.legend(loc="best", fontsize=8)

    ax_b.plot(trace.t, trace.belief[:, 0], label="b(cautious)")
    ax_b.set_ylim(-0.02, 1.02)
    ax_b.set_xlabel("t [s]")
    ax_b.set_ylabel("belief")
    axh = ax_b.twinx()
    axh.plot(trace.t, trace.h, color="tab:green", alpha=0.6)
    axh.axhline(0.0, color="tab:green", ls=":", lw=1)
    axh.set_ylabel("safety margin h [m]", color="tab:green")
    ax_b.legend(loc="best", fontsize=8)

    theta_name = "cautious" if trace.theta_true < 0 else "aggressive"
    fig.suptitle(f"episode: theta={theta_name}, "
                 f"completed={trace.completed}, timeout={trace.timeout}")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_montecarlo_figure(result: MonteCarloResult, out_path: str) -> str:
    """Bar-panel summary across controllers: safety, merges, times, compute."""
    rows = result.rows()
    keys = list(result.controllers)
    timing = result.timing()
    panels = [
        ("safety_rate", "safety rate", 1.0),
        ("front_merge_rate", "front-merge rate", 1.0),
        ("completion_time_mean", "mean completion [s]", None),
        ("min_distance_mean", "mean min distance [m]", None),
        ("timeout_rate", "timeout rate", 1.0),
        ("mean_step_ms", "mean step time [ms]", None),
    ]
    fig, axes = plt.subplots(2, 3, figsize=(13, 7))
    x = np.arange(len(keys))
    for ax, (col, title, top) in zip(axes.flat, panels):
        if col == "mean_step_ms":
            vals = [1e3 * timing[k]["mean_step_time"] for k in keys]
        else:
            vals = [r[col] for r in rows]
        ax.bar(x, vals, color="tab:blue")
        ax.set_xticks(x)
        ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=8)
        ax.set_title(title, fontsize=10)
        if top is not None:
            ax.set_ylim(0, max(top, 1.05 * max(vals or [1.0])))
    fig.suptitle(f"Monte Carlo summary (n={result.n_per_theta} per theta, "
                 f"seed={result.seed})")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
