"""Command-line interface: simulation, Monte Carlo, dataset, training, eval.

Exit-code contract: 0 success, 1 configuration/schema error (message names
the offending field), 2 run-level failure (collision, timeout, failed run).
Every command is reproducible from (config file, flags, seed); all output
files carry a config-hash/seed header.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources

from .classifier import (Dataset, gen_dataset, load_model, save_model,
                         train)
from .errors import ConfigError, ModelError, NumericsError
from .runtime import (EpisodeTrace, compute_metrics, make_agent, monte_carlo,
                      run_episode)
from .world import ScenarioConfig, load_preset

log = logging.getLogger(__name__)

_THETA_NAMES = {"cau": 0, "cautious": 0, "agg": 1, "aggressive": 1}


def _load_scenario(value: str) -> ScenarioConfig:
    """Path to a config JSON, or a shipped preset name."""
    if os.path.exists(value):
        with open(value) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"scenario file {value}: {err}") from err
        return ScenarioConfig.from_dict(raw)
    name = value.removesuffix(".json")
    try:
        return load_preset(name)
    except (FileNotFoundError, ModuleNotFoundError):
        raise ConfigError(f"scenario '{value}' is neither a file nor a "
                          f"shipped preset") from None


def _default_model_path() -> str:
    return str(resources.files("mpcswitch").joinpath("data/switch_model.json"))


def _resolve_model(args, needed: bool):
    path = getattr(args, "model", None) or _default_model_path()
    if not os.path.exists(path):
        if needed:
            raise ConfigError(f"switch model file not found: {path} "
                              f"(--model)")
        return None
    with open(path) as fh:
        return load_model(fh.read())


def _parse_controllers(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if not tok:
            continue
        if tok == "switch":
            out.append("switch")
        elif tok.isdigit() and 1 <= int(tok) <= 5:
            out.append(int(tok))
        else:
            raise ConfigError(f"--controllers entry '{tok}' is not a level "
                              f"1-5 or 'switch'")
    if not out:
        raise ConfigError("--controllers selected nothing")
    return out


def _theta_value(cfg: ScenarioConfig, name: str) -> float:
    key = name.strip().lower()
    if key not in _THETA_NAMES:
        raise ConfigError(f"--theta must be cau or agg, got '{name}'")
    return cfg.behavior.theta_set[_THETA_NAMES[key]]


def _print_metrics(m, prefix: str = "") -> None:
    usage = " ".join(f"L{k}={v:.2f}" for k, v in sorted(m.usage.items())
                     if v > 0)
    print(f"{prefix}collided={m.collided} min_distance={m.min_distance:.3f} "
          f"front_merge={m.front_merge} completion_time={m.completion_time:.2f} "
          f"timeout={m.timeout}")
    print(f"{prefix}max_abs_acc={m.max_abs_acc:.3f} "
          f"control_effort={m.control_effort:.3f} "
          f"trajectory_cost={m.trajectory_cost:.3f} "
          f"mean_step_ms={1e3 * m.mean_step_time:.1f} usage[{usage}] "
          f"escalations={m.escalations}")


def cmd_simulate(args) -> int:
    cfg = _load_scenario(args.scenario)
    theta = _theta_value(cfg, args.theta)
    spec = "switch" if args.controller == "switch" else int(args.controller)
    model = _resolve_model(args, needed=spec == "switch")
    agent = make_agent(spec, cfg, model)
    trace = run_episode(cfg, agent, theta, args.seed)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(trace.to_jsonl())
        print(f"trace written to {args.out}")
    m = compute_metrics(trace, cfg)
    _print_metrics(m)
    if args.figures:
        from .report import render_trace_figure
        base = os.path.splitext(args.out or "trace")[0]
        print(f"figure written to "
              f"{render_trace_figure(trace, cfg, base + '.png')}")
    return 2 if (m.collided or m.timeout) else 0


def cmd_montecarlo(args) -> int:
    cfg = _load_scenario(args.scenario)
    controllers = _parse_controllers(args.controllers)
    model = _resolve_model(args, needed="switch" in controllers)
    os.makedirs(args.out, exist_ok=True)
    result = monte_carlo(cfg, controllers, args.runs, args.seed, model=model,
                         jobs=args.jobs, keep_traces=args.keep_traces)
    csv_path = os.path.join(args.out, "montecarlo.csv")
    with open(csv_path, "w") as fh:
        fh.write(result.to_csv())
    with open(os.path.join(args.out, "montecarlo.json"), "w") as fh:
        fh.write(result.to_json())
    # wall-clock sidecar: intentionally separate from the deterministic CSV
    with open(os.path.join(args.out, "timing.json"), "w") as fh:
        json.dump(result.timing(), fh, indent=2, sort_keys=True)
    if args.keep_traces:
        tdir = os.path.join(args.out, "traces")
        os.makedirs(tdir, exist_ok=True)
        for key, traces in result.traces.items():
            for tr in traces:
                name = f"{key}_{tr.seed_key}.jsonl".replace("/", "-")
                with open(os.path.join(tdir, name), "w") as fh:
                    fh.write(tr.to_jsonl())
    if args.figures:
        from .report import render_montecarlo_figure
        render_montecarlo_figure(result,
                                 os.path.join(args.out, "montecarlo.png"))
    for row in result.rows():
        print(f"{row['controller']}: safety={row['safety_rate']:.3f} "
              f"front={row['front_merge_rate']:.3f} "
              f"completion={row['completion_time_mean']:.2f}s "
              f"min_dist={row['min_distance_mean']:.2f}m "
              f"timeouts={row['timeout_rate']:.3f}")
    print(f"results in {args.out}")
    return 0


def cmd_gen_dataset(args) -> int:
    cfg = _load_scenario(args.scenario)
    candidates = tuple(int(c) for c in args.candidates.split(","))
    ds = gen_dataset(cfg, args.n, args.seed, candidates=candidates,
                     beta=args.beta, epsilon=args.epsilon, jobs=args.jobs)
    with open(args.out, "w") as fh:
        fh.write(ds.to_csv())
    print(f"{len(ds.label_idx)} samples written to {args.out}")
    return 0


def cmd_train(args) -> int:
    with open(args.data) as fh:
        ds = Dataset.from_csv(fh.read())
    kwargs = dict(lr=args.lr, batch=args.batch, epochs=args.epochs,
                  alpha=args.alpha, seed=args.seed, split=args.split,
                  loss_form=args.loss)
    if args.hidden:
        kwargs["hidden"] = tuple(int(h) for h in args.hidden.split(","))
    model, report = train(ds, **kwargs)
    model.meta["label_beta"] = args.beta
    model.meta["label_epsilon"] = args.epsilon
    with open(args.out, "w") as fh:
        fh.write(save_model(model))
    print(f"train accuracy {report['final_train_acc']:.4f}, "
          f"held-out accuracy {report['final_test_acc']:.4f} "
          f"({model.meta['epochs_run']} epochs)")
    print(f"model written to {args.out}")
    return 0


def cmd_eval_switch(args) -> int:
    cfg = _load_scenario(args.scenario)
    model = _resolve_model(args, needed=True)
    result = monte_carlo(cfg, [5, "switch"], args.runs, args.seed,
                         model=model, jobs=args.jobs)
    rows = {r["controller"]: r for r in result.rows()}
    timing = result.timing()
    if "test_acc" in model.meta:
        print(f"model held-out accuracy (recorded at training): "
              f"{model.meta['test_acc']:.4f}")
    sw, dual = rows["switch"], rows["5"]
    usage = {k: sw[f"usage_{k}"] for k in range(1, 6)}
    total = sum(usage.values())
    frac = " ".join(f"L{k}={v:.3f}" for k, v in usage.items())
    print(f"switch usage fractions: {frac} (sum={total:.3f})")
    cost_ratio = sw["trajectory_cost_mean"] / dual["trajectory_cost_mean"]
    compute_ratio = (timing["switch"]["mean_step_time"]
                     / timing["5"]["mean_step_time"])
    print(f"comparison: cost switch/dual={cost_ratio:.3f} "
          f"compute switch/dual={compute_ratio:.3f} "
          f"safety switch={sw['safety_rate']:.3f} dual={dual['safety_rate']:.3f}")
    return 0


def cmd_export_trace(args) -> int:
    with open(args.trace) as fh:
        trace = EpisodeTrace.from_jsonl(fh.read())
    cols = ["t", "ego_s", "ego_v", "opp_s", "opp_v", "b_cau", "b_agg", "h",
            "u_ego", "u_opp", "level", "status"]
    lines = [f"# config_hash={trace.config_hash} seed_key={trace.seed_key} "
             f"theta_true={trace.theta_true}", ",".join(cols)]
    for k in range(trace.n_steps + 1):
        vals = [f"{trace.t[k]:.6f}", f"{trace.ego_s[k]:.6f}",
                f"{trace.ego_v[k]:.6f}", f"{trace.opp_s[k]:.6f}",
                f"{trace.opp_v[k]:.6f}", f"{trace.belief[k, 0]:.6f}",
                f"{trace.belief[k, 1]:.6f}", f"{trace.h[k]:.6f}"]
        if k < trace.n_steps:
            vals += [f"{trace.u_ego[k]:.6f}", f"{trace.u_opp[k]:.6f}",
                     str(int(trace.level[k])), trace.status[k]]
        else:
            vals += ["", "", "", ""]
        lines.append(",".join(vals))
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"step table written to {args.out}")
    if args.figures:
        if not args.scenario:
            raise ConfigError("--figures on export-trace needs --scenario "
                              "for the path geometry")
        cfg = _load_scenario(args.scenario)
        if cfg.config_hash() != trace.config_hash:
            log.warning("scenario hash %s differs from the trace's %s",
                        cfg.config_hash(), trace.config_hash)
        from .report import render_trace_figure
        base = os.path.splitext(args.out)[0]
        print(f"figure written to "
              f"{render_trace_figure(trace, cfg, base + '.png')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mpcswitch",
        description="Interactive MPC hierarchy: simulate, evaluate, train "
                    "the switching controller.")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="run one closed-loop episode")
    sp.add_argument("--scenario", required=True,
                    help="config JSON path or preset name")
    sp.add_argument("--controller", required=True,
                    help="level 1-5 or 'switch'")
    sp.add_argument("--theta", default="cau", help="cau or agg")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="trace JSONL path")
    sp.add_argument("--model", help="switch model JSON (default: shipped)")
    sp.add_argument("--figures", action="store_true",
                    help="render the episode figure next to --out")
    sp.set_defaults(func=cmd_simulate)

    mp = sub.add_parser("montecarlo", help="matched-seed evaluation table")
    mp.add_argument("--scenario", required=True)
    mp.add_argument("--runs", type=int, default=50,
                    help="episodes per hypothesis")
    mp.add_argument("--controllers", default="1,2,3,4,5",
                    help="comma list of levels and/or 'switch'")
    mp.add_argument("--seed", type=int, default=0)
    mp.add_argument("--out", required=True, help="output directory")
    mp.add_argument("--jobs", type=int, default=1)
    mp.add_argument("--keep-traces", action="store_true")
    mp.add_argument("--model", help="switch model JSON (default: shipped)")
    mp.add_argument("--figures", action="store_true")
    mp.set_defaults(func=cmd_montecarlo)

    gp = sub.add_parser("gen-dataset", help="label training scenarios")
    gp.add_argument("--scenario", required=True)
    gp.add_argument("--n", type=int, required=True)
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--out", required=True)
    gp.add_argument("--candidates", default="1,3,5")
    gp.add_argument("--beta", type=float, default=50.0,
                    help="front-merge bonus in the labeling cost")
    gp.add_argument("--epsilon", type=float, default=0.05,
                    help="near-optimality tolerance fraction")
    gp.add_argument("--jobs", type=int, default=1)
    gp.set_defaults(func=cmd_gen_dataset)

    tp = sub.add_parser("train", help="train the switching classifier")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--alpha", type=float, default=2.0,
                    help="level-penalty base of the loss")
    tp.add_argument("--beta", type=float, default=50.0,
                    help="recorded labeling beta (provenance)")
    tp.add_argument("--epsilon", type=float, default=0.05,
                    help="recorded labeling epsilon (provenance)")
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--lr", type=float, default=1e-3)
    tp.add_argument("--epochs", type=int, default=200)
    tp.add_argument("--batch", type=int, default=64)
    tp.add_argument("--split", type=float, default=0.2)
    tp.add_argument("--loss", default="level-penalty",
                    choices=["level-penalty", "literal"])
    tp.add_argument("--hidden", help="comma list, e.g. 128,64,32")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval-switch", help="switcher vs always-dual")
    ep.add_argument("--model", help="switch model JSON (default: shipped)")
    ep.add_argument("--scenario", required=True)
    ep.add_argument("--runs", type=int, default=50,
                    help="episodes per hypothesis")
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--jobs", type=int, default=1)
    ep.set_defaults(func=cmd_eval_switch)

    xp = sub.add_parser("export-trace", help="trace JSONL to step CSV")
    xp.add_argument("--trace", required=True)
    xp.add_argument("--out", required=True)
    xp.add_argument("--scenario", help="needed with --figures")
    xp.add_argument("--figures", action="store_true")
    xp.set_defaults(func=cmd_export_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 1
    except ModelError as err:
        print(f"model/schema error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return 1
    except NumericsError as err:
        print(f"run failed: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
