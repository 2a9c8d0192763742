"""Switching-controller classifier: dataset generation, training, inference.

A small feed-forward softmax network maps the interaction state
z = [s_e, v_e, s_o, v_o, b] to a probability over candidate controllers.
Labels come from matched-seed closed-loop rollouts of every candidate; the
training loss penalizes predicting a lower interaction level than labeled by
a factor alpha per level skipped.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .belief import Belief
from .errors import ConfigError, ModelError
from .world import ScenarioConfig, VehicleState, terminal_cost

log = logging.getLogger(__name__)

MODEL_FORMAT = 1
DATASET_FORMAT = 1
HIDDEN_SIZES = (128, 64, 32)
DEFAULT_CANDIDATES = (1, 3, 5)
BELIEF_GRID = tuple(round(0.1 * i, 1) for i in range(11))

_LOG_FLOOR = 1e-12


@dataclass
class MlpModel:
    """ReLU MLP with softmax output and baked-in feature standardization."""

    sizes: tuple                  # (d, *hidden, m)
    weights: list                 # W_l, shape (sizes[l+1], sizes[l])
    biases: list                  # b_l, shape (sizes[l+1],)
    feat_mean: np.ndarray
    feat_std: np.ndarray
    candidate_levels: tuple = DEFAULT_CANDIDATES
    loss_form: str = "level-penalty"
    meta: dict = field(default_factory=dict)

    @property
    def dim_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]


def init_model(dim_in: int, n_out: int, rng: np.random.Generator,
               hidden: Sequence[int] = HIDDEN_SIZES,
               candidate_levels: Sequence[int] = DEFAULT_CANDIDATES) -> MlpModel:
    """He-initialized network with identity standardization."""
    sizes = (dim_in, *hidden, n_out)
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a)))
        biases.append(np.zeros(b))
    return MlpModel(sizes=sizes, weights=weights, biases=biases,
                    feat_mean=np.zeros(dim_in), feat_std=np.ones(dim_in),
                    candidate_levels=tuple(int(x) for x in candidate_levels))


def standardize(model: MlpModel, z: np.ndarray) -> np.ndarray:
    return (np.asarray(z, dtype=float) - model.feat_mean) / model.feat_std


def destandardize(model: MlpModel, zs: np.ndarray) -> np.ndarray:
    return np.asarray(zs, dtype=float) * model.feat_std + model.feat_mean


def _forward_batch(model: MlpModel, Z_std: np.ndarray):
    """Returns (probabilities, per-layer activations) for backprop."""
    acts = [Z_std]
    h = Z_std
    for l in range(len(model.weights) - 1):
        h = np.maximum(0.0, h @ model.weights[l].T + model.biases[l])
        acts.append(h)
    logits = h @ model.weights[-1].T + model.biases[-1]
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p, acts


def forward(model: MlpModel, z) -> np.ndarray:
    """Probability vector over the candidate controllers for one raw z."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.dim_in,):
        raise ModelError(f"feature dimension {z.shape} does not match "
                         f"model input {model.dim_in}")
    p, _ = _forward_batch(model, standardize(model, z)[None, :])
    p = np.clip(p[0], 1e-15, None)
    return p / p.sum()


def weighted_loss(pi: np.ndarray, label: np.ndarray, alpha: float,
                  form: str = "level-penalty") -> float:
    """Classification loss for one sample.

    level-penalty (default): alpha**max(0, i* - i_hat) * (−log pi[i*]), with
    i_hat = argmax pi; predicting below the labeled interaction level is
    amplified by alpha per level skipped. `literal` keeps the weighted
    cross-entropy sum, which with one-hot labels reduces to plain
    cross-entropy (the weight multiplies only the i = i* term).
    """
    if alpha <= 1.0:
        raise ConfigError("alpha must exceed 1")
    pi = np.asarray(pi, dtype=float)
    label = np.asarray(label, dtype=float)
    i_star = int(np.argmax(label))
    ce = -np.log(max(float(pi[i_star]), _LOG_FLOOR))
    if form == "literal":
        return float(ce)
    if form != "level-penalty":
        raise ConfigError(f"unknown loss form {form!r}")
    i_hat = int(np.argmax(pi))
    return float(alpha ** max(0, i_star - i_hat) * ce)


def _batch_loss_grad(model: MlpModel, Z_std, label_idx, alpha, form):
    """Mean loss over the batch and gradients wrt weights and biases.

    The penalty weight is a function of argmax pi, piecewise constant in the
    parameters; it is treated as a constant in the gradient, so each sample
    contributes weight * (softmax - onehot) at the logits.
    """
    n = len(label_idx)
    p, acts = _forward_batch(model, Z_std)
    rows = np.arange(n)
    p_star = np.clip(p[rows, label_idx], _LOG_FLOOR, None)
    if form == "level-penalty":
        i_hat = np.argmax(p, axis=1)
        w = alpha ** np.maximum(0, label_idx - i_hat)
    else:
        w = np.ones(n)
    loss = float(np.mean(w * (-np.log(p_star))))

    delta = p.copy()
    delta[rows, label_idx] -= 1.0
    delta *= (w / n)[:, None]
    gw = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    for l in range(len(model.weights) - 1, -1, -1):
        gw[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * (acts[l] > 0.0)
    return loss, gw, gb


# -- dataset -------------------------------------------------------------------


@dataclass
class LabeledSample:
    """One classification sample: raw features, one-hot label, rollout costs."""

    z: np.ndarray
    label: np.ndarray
    costs: np.ndarray

    @property
    def label_index(self) -> int:
        return int(np.argmax(self.label))


@dataclass
class Dataset:
    """Feature matrix (raw, unstandardized), labels, and rollout costs."""

    Z: np.ndarray            # (n, d)
    label_idx: np.ndarray    # (n,) positions into candidate_levels
    costs: np.ndarray        # (n, m) composite rollout costs
    candidate_levels: tuple = DEFAULT_CANDIDATES
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.Z)

    def to_csv(self) -> str:
        d, m = self.Z.shape[1], self.costs.shape[1]
        head = {"format": DATASET_FORMAT,
                "candidates": list(self.candidate_levels)}
        head.update(self.meta)
        lines = ["# " + json.dumps(head, sort_keys=True),
                 ",".join([f"z{i + 1}" for i in range(d)] + ["label_index"]
                          + [f"J{i + 1}" for i in range(m)])]
        for i in range(len(self.Z)):
            row = [repr(float(v)) for v in self.Z[i]]
            row.append(str(int(self.label_idx[i])))
            row += [repr(float(v)) for v in self.costs[i]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        lines = [ln for ln in text.strip().split("\n") if ln]
        meta = {}
        if lines and lines[0].startswith("#"):
            meta = json.loads(lines.pop(0)[1:].strip())
        if meta.get("format", DATASET_FORMAT) != DATASET_FORMAT:
            raise ModelError(f"unsupported dataset format {meta.get('format')}")
        header = lines.pop(0).split(",")
        try:
            li = header.index("label_index")
        except ValueError:
            raise ModelError("dataset header lacks label_index column") from None
        d, m = li, len(header) - li - 1
        if m < 1 or d < 1:
            raise ModelError("dataset header needs z and J columns")
        rows = [ln.split(",") for ln in lines]
        Z = np.array([[float(v) for v in r[:d]] for r in rows])
        idx = np.array([int(r[d]) for r in rows], dtype=int)
        J = np.array([[float(v) for v in r[d + 1:]] for r in rows])
        cands = tuple(meta.get("candidates", DEFAULT_CANDIDATES))
        if np.any(idx < 0) or np.any(idx >= m):
            raise ModelError("label_index out of candidate range")
        return cls(Z=Z, label_idx=idx, costs=J, candidate_levels=cands,
                   meta=meta)


def rollout_cost(cfg: ScenarioConfig, level_spec, theta: float,
                 ego0: VehicleState, opp0: VehicleState, b0, seed,
                 n_steps: int):
    """Closed-loop rollout over n_steps: (cost, front_merge, collided).

    Cost is the executed stage-cost sum plus the terminal cost, the same
    quantities the controllers optimize.
    """
    from .runtime import compute_metrics, make_agent, run_episode

    agent = make_agent(level_spec, cfg)
    trace = run_episode(cfg, agent, theta, seed, ego0=ego0, opp0=opp0,
                        b0=b0, max_steps=n_steps)
    m = compute_metrics(trace, cfg)
    final = VehicleState(trace.ego_s[-1], trace.ego_v[-1])
    cost = m.trajectory_cost + terminal_cost(final, cfg.weights)
    return cost, m.front_merge, m.collided


def label_scenario(cfg: ScenarioConfig, ego0: VehicleState,
                   opp0: VehicleState, b0, candidates: Sequence[int],
                   beta: float, epsilon: float, seed,
                   h_eval: Optional[int] = None) -> LabeledSample:
    """Label one interaction state with the cheapest sufficient controller.

    Per candidate: closed-loop rollouts of h_eval steps against ground-truth
    opponents of every theta (seeds fixed across candidates), averaged;
    J = mean trajectory cost − beta * mean front-merge indicator. A collision
    in any rollout sets that candidate's J to +inf. The label is the lowest
    level within epsilon * |J*| of the best J*.
    """
    if beta <= 0.0 or epsilon <= 0.0:
        raise ConfigError("beta and epsilon must be positive")
    levels = [int(c) for c in candidates]
    if levels != sorted(levels):
        raise ConfigError("candidates must be ordered by ascending level")
    n_steps = int(h_eval if h_eval is not None else cfg.horizon)
    b0 = Belief(b0, floor=cfg.belief_floor) if not isinstance(b0, Belief) else b0
    theta_set = cfg.behavior.theta_set
    root = np.random.SeedSequence(seed) if not isinstance(
        seed, np.random.SeedSequence) else seed
    theta_seeds = root.spawn(len(theta_set))

    z = np.concatenate([[ego0.s, ego0.v, opp0.s, opp0.v], b0.as_array()])
    costs = np.empty(len(levels))
    for i, lv in enumerate(levels):
        js, fronts, crashed = [], [], False
        for ti, theta in enumerate(theta_set):
            # re-derive the child so every candidate sees identical seeds
            ss = np.random.SeedSequence(entropy=theta_seeds[ti].entropy,
                                        spawn_key=theta_seeds[ti].spawn_key)
            c, fr, col = rollout_cost(cfg, lv, theta, ego0, opp0, b0, ss,
                                      n_steps)
            js.append(c)
            fronts.append(fr)
            crashed = crashed or col
        costs[i] = np.inf if crashed else \
            float(np.mean(js)) - beta * float(np.mean(fronts))
    j_best = float(np.min(costs))
    if not np.isfinite(j_best):
        raise ModelError("no candidate completes the scenario without "
                         "collision; state is not labelable")
    thresh = j_best + epsilon * abs(j_best)
    i_star = int(np.nonzero(costs <= thresh)[0][0])
    label = np.zeros(len(levels))
    label[i_star] = 1.0
    return LabeledSample(z=z, label=label, costs=costs)


def sample_dataset_state(cfg: ScenarioConfig, rng: np.random.Generator):
    """Draw one interaction state for dataset generation.

    The episode-visitation distribution covers arcs well past the initial
    ranges, so positions are sampled up to just beyond the conflict point
    (half coupled to near-simultaneous arrival, half independent), speeds
    over the initial ranges widened by 1 m/s, and the cautious-belief value
    from the grid {0, 0.1, ..., 1}.
    """
    s_e_conf, s_o_conf, _ = cfg.conflict_point()
    ego_v = rng.uniform(max(cfg.ego_v0[0] - 1.0, 0.5), cfg.ego_v0[1] + 1.0)
    opp_v = rng.uniform(max(cfg.opp_v0[0] - 1.0, 0.5), cfg.opp_v0[1] + 1.0)
    ego_s = rng.uniform(0.0, s_e_conf + 5.0)
    if rng.random() < 0.5:
        t_e = (s_e_conf - ego_s) / ego_v
        opp_s = s_o_conf - opp_v * (t_e + rng.uniform(-1.5, 1.5))
        opp_s = min(max(opp_s, 0.0), s_o_conf + 5.0)
    else:
        opp_s = rng.uniform(0.0, s_o_conf + 5.0)
    b_cau = BELIEF_GRID[rng.integers(len(BELIEF_GRID))]
    b0 = Belief([b_cau, 1.0 - b_cau], floor=cfg.belief_floor)
    return VehicleState(ego_s, ego_v), VehicleState(opp_s, opp_v), b0


def _gen_one(args):
    cfg_dict, i, root_seed, candidates, beta, epsilon, h_eval = args
    cfg = ScenarioConfig.from_dict(cfg_dict)
    from .world import safety_margin

    for attempt in range(64):
        ss = np.random.SeedSequence(entropy=(int(root_seed), i, attempt))
        rng = np.random.default_rng(ss)
        ego0, opp0, b0 = sample_dataset_state(cfg, rng)
        if safety_margin(ego0, opp0, cfg) <= 0.0:
            continue
        try:
            s = label_scenario(cfg, ego0, opp0, b0, candidates, beta,
                               epsilon, ss.spawn(1)[0], h_eval)
        except ModelError:
            continue  # inevitable-collision state: not labelable, redraw
        return i, s
    raise ModelError(f"could not draw a labelable state for sample {i}")


def gen_dataset(cfg: ScenarioConfig, n: int, seed: int,
                candidates: Sequence[int] = DEFAULT_CANDIDATES,
                beta: float = 50.0, epsilon: float = 0.05,
                h_eval: Optional[int] = None, jobs: int = 1) -> Dataset:
    """Generate n labeled samples; deterministic in (cfg, seed)."""
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    cfg_dict = cfg.to_dict()
    work = [(cfg_dict, i, seed, tuple(int(c) for c in candidates), beta,
             epsilon, h_eval) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_gen_one, work, chunksize=1))
    else:
        results = [_gen_one(w) for w in work]
    results.sort(key=lambda r: r[0])
    samples = [s for _, s in results]
    return Dataset(
        Z=np.stack([s.z for s in samples]),
        label_idx=np.array([s.label_index for s in samples], dtype=int),
        costs=np.stack([s.costs for s in samples]),
        candidate_levels=tuple(int(c) for c in candidates),
        meta={"seed": int(seed), "beta": beta, "epsilon": epsilon,
              "config_hash": cfg.config_hash(), "n": n},
    )


# -- training ------------------------------------------------------------------


def _stratified_split(label_idx: np.ndarray, test_frac: float,
                      rng: np.random.Generator):
    train, test = [], []
    for c in np.unique(label_idx):
        idx = np.nonzero(label_idx == c)[0]
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(test_frac * len(idx)))) if len(idx) > 1 else 0
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def accuracy(model: MlpModel, Z: np.ndarray, label_idx: np.ndarray) -> float:
    p, _ = _forward_batch(model, standardize(model, Z))
    return float(np.mean(np.argmax(p, axis=1) == label_idx))


def train(dataset: Dataset, lr: float = 1e-3, batch: int = 64,
          epochs: int = 200, alpha: float = 2.0, seed: int = 0,
          split: float = 0.2, momentum: float = 0.9,
          loss_form: str = "level-penalty",
          hidden: Sequence[int] = HIDDEN_SIZES):
    """Train the switching classifier; returns (model, report).

    Mini-batch gradient descent (with momentum) and analytic
    backpropagation; deterministic given the seed. Feature standardization
    constants come from the training split and persist in the model. A
    non-finite epoch loss aborts training and returns the last finite-loss
    checkpoint.
    """
    if len(dataset) < 100:
        raise ConfigError("training needs at least 100 samples")
    rng = np.random.default_rng(seed)
    tr_idx, te_idx = _stratified_split(dataset.label_idx, split, rng)
    Z_tr, y_tr = dataset.Z[tr_idx], dataset.label_idx[tr_idx]
    Z_te, y_te = dataset.Z[te_idx], dataset.label_idx[te_idx]

    m = dataset.costs.shape[1]
    model = init_model(dataset.Z.shape[1], m, rng, hidden=hidden,
                       candidate_levels=dataset.candidate_levels)
    model.loss_form = loss_form
    model.feat_mean = Z_tr.mean(axis=0)
    model.feat_std = np.maximum(Z_tr.std(axis=0), 1e-8)
    Zs_tr = standardize(model, Z_tr)

    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    checkpoint = None
    report = {"epochs": [], "train_loss": [], "test_acc": [],
              "n_train": len(tr_idx), "n_test": len(te_idx)}
    n = len(Z_tr)
    for epoch in range(epochs):
        order = rng.permutation(n)
        ep_loss, n_batches = 0.0, 0
        for k in range(0, n, batch):
            sel = order[k:k + batch]
            loss, gw, gb = _batch_loss_grad(model, Zs_tr[sel], y_tr[sel],
                                            alpha, loss_form)
            ep_loss += loss
            n_batches += 1
            for l in range(len(model.weights)):
                vel_w[l] = momentum * vel_w[l] - lr * gw[l]
                vel_b[l] = momentum * vel_b[l] - lr * gb[l]
                model.weights[l] = model.weights[l] + vel_w[l]
                model.biases[l] = model.biases[l] + vel_b[l]
        ep_loss /= max(n_batches, 1)
        if not np.isfinite(ep_loss):
            log.warning("training diverged at epoch %d; restoring last "
                        "checkpoint", epoch)
            if checkpoint is not None:
                model.weights = [w.copy() for w in checkpoint[0]]
                model.biases = [b.copy() for b in checkpoint[1]]
            break
        checkpoint = ([w.copy() for w in model.weights],
                      [b.copy() for b in model.biases])
        report["epochs"].append(epoch)
        report["train_loss"].append(ep_loss)
        report["test_acc"].append(accuracy(model, Z_te, y_te)
                                  if len(te_idx) else float("nan"))
    report["final_train_acc"] = accuracy(model, Z_tr, y_tr)
    report["final_test_acc"] = accuracy(model, Z_te, y_te) \
        if len(te_idx) else float("nan")
    model.meta = {"alpha": alpha, "lr": lr, "batch": batch,
                  "epochs_run": len(report["epochs"]), "seed": seed,
                  "test_acc": report["final_test_acc"],
                  "dataset_meta": dataset.meta}
    return model, report


# -- model IO ------------------------------------------------------------------


def save_model(model: MlpModel) -> str:
    return json.dumps({
        "format": MODEL_FORMAT,
        "sizes": list(model.sizes),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "feat_mean": model.feat_mean.tolist(),
        "feat_std": model.feat_std.tolist(),
        "candidate_levels": list(model.candidate_levels),
        "loss_form": model.loss_form,
        "meta": model.meta,
    }, sort_keys=True)


def load_model(text: str) -> MlpModel:
    d = json.loads(text)
    if d.get("format") != MODEL_FORMAT:
        raise ModelError(f"unsupported model format {d.get('format')!r}")
    return MlpModel(
        sizes=tuple(d["sizes"]),
        weights=[np.array(w, dtype=float) for w in d["weights"]],
        biases=[np.array(b, dtype=float) for b in d["biases"]],
        feat_mean=np.array(d["feat_mean"], dtype=float),
        feat_std=np.array(d["feat_std"], dtype=float),
        candidate_levels=tuple(d["candidate_levels"]),
        loss_form=d.get("loss_form", "level-penalty"),
        meta=d.get("meta", {}),
    )
