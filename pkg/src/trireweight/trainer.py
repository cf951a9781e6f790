"""Online alternating bi-level optimizer plus the SL/NSL baselines and the ablation matrix.

One iteration:

1. sample a batch of originals and a batch of generated samples, build
   triplets and perturbed copies;
2. ``theta' = theta - eta_theta * grad_theta L_cls(theta, alpha)``;
3. ``alpha' = project(alpha - eta_alpha * grad_alpha L_weight(theta'(alpha)))``,
   differentiating through step 2.

Steps 2 and 3 are one compiled autodiff program evaluated once per iteration.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .datasim import (STREAM_BATCH_GENERATED, STREAM_BATCH_ORIGINAL, STREAM_PERTURB,
                      STREAM_TRIPLETS, ConfigError, GeneratedPool, HiddenLabels, OriginalDataset,
                      SimConfig, augment, make_original, perturb, rng_for, sample_triplets)
from .losses import (BatchInputs, LossConfig, batch_bindings, batch_inputs, build_inner_loss,
                     build_outer_loss, onehot)
from .models import (ModelConfig, classifier_leaves, init_params, load_checkpoint, predict,
                     predict_weights, project_unit_ball, save_checkpoint, weightnet_leaves)

log = logging.getLogger(__name__)

MODES = ("trireweight", "sl", "nsl")


class DivergedRunError(RuntimeError):
    def __init__(self, iteration: int, reason: str):
        super().__init__(f"run diverged at iteration {iteration}: {reason}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainerConfig:
    T: int = 2000
    eta_theta: float = 0.05
    eta_alpha: float = 100.0
    batch_original: int = 32
    batch_generated: int = 64
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    meta_split_fraction: float = 0.0
    eval_every: int = 25
    consistency_sigma: float = 0.3
    full_batch: bool = False
    force_weight: float | None = None
    divergence_threshold: float = 1e6

    def validate(self) -> "TrainerConfig":
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.eta_theta < 0 or self.eta_alpha < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.batch_original < 1 or self.batch_generated < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0.0 <= self.meta_split_fraction < 1.0:
            raise ConfigError("meta_split_fraction must lie in [0, 1)")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.consistency_sigma < 0:
            raise ConfigError("consistency_sigma must be >= 0")
        self.loss.validate()
        self.model.validate()
        return self

    def replace(self, **changes) -> "TrainerConfig":
        return replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainData:
    originals: OriginalDataset
    pool: GeneratedPool
    test: OriginalDataset | None = None

    @classmethod
    def simulate(cls, sim: SimConfig) -> "TrainData":
        originals = make_original(sim)
        return cls(originals, augment(originals, sim), make_original(sim, "test"))


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)
    # one entry per iteration: L_weight before/after the theta step, |grad_alpha|
    trace_t: list = field(default_factory=list)
    trace_outer_before: list = field(default_factory=list)
    trace_outer_after: list = field(default_factory=list)
    trace_grad_alpha_norm: list = field(default_factory=list)
    full_batch: bool = False
    seed: int = 0
    mode: str = "trireweight"
    final_weights: dict | None = None  # origin_index, gen_index, weight arrays
    weight_snapshots: list = field(default_factory=list, repr=False)  # (t, weights)

    def state(self) -> dict:
        return {"records": self.records, "trace_t": self.trace_t,
                "trace_outer_before": self.trace_outer_before,
                "trace_outer_after": self.trace_outer_after,
                "trace_grad_alpha_norm": self.trace_grad_alpha_norm,
                "full_batch": self.full_batch, "seed": self.seed, "mode": self.mode}

    @classmethod
    def from_state(cls, state: Mapping) -> "RunMetrics":
        return cls(records=list(state.get("records", [])),
                   trace_t=list(state.get("trace_t", [])),
                   trace_outer_before=list(state.get("trace_outer_before", [])),
                   trace_outer_after=list(state.get("trace_outer_after", [])),
                   trace_grad_alpha_norm=list(state.get("trace_grad_alpha_norm", [])),
                   full_batch=bool(state.get("full_batch", False)),
                   seed=int(state.get("seed", 0)), mode=str(state.get("mode", "trireweight")))


class RunResult(NamedTuple):
    theta: dict
    alpha: dict
    metrics: RunMetrics


def theta_digest(theta: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(theta):
        h.update(k.encode())
        h.update(np.ascontiguousarray(theta[k], dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(theta: Mapping[str, np.ndarray], dataset: OriginalDataset,
             model_cfg: ModelConfig, prob_floor: float = 1e-6) -> dict:
    """Accuracy and mean floored cross-entropy of the classifier on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs, _, _ = predict(dataset.X, theta, model_cfg)
    acc = float(np.mean(np.argmax(probs, axis=1) == dataset.y))
    picked = probs[np.arange(len(dataset)), dataset.y]
    risk = float(np.mean(-np.log(np.maximum(picked, prob_floor))))
    return {"accuracy": acc, "risk": risk}


# ---------------------------------------------------------------------------
# the bi-level step
# ---------------------------------------------------------------------------

class StepGraph(NamedTuple):
    inputs: BatchInputs
    meta_inputs: tuple  # (X, Y) leaves the outer loss reads
    inner_loss: ad.Expression
    weights: ad.Expression | None
    grad_theta: dict  # name -> Expression
    theta_next: dict  # name -> Expression, depends on alpha through grad_theta
    outer_before: ad.Expression
    outer_after: ad.Expression


def build_step_graph(config: TrainerConfig, generated: bool = True,
                     separate_meta: bool = False) -> StepGraph:
    mcfg, lcfg = config.model, config.loss
    theta, alpha = classifier_leaves(mcfg), weightnet_leaves(mcfg)
    inputs = batch_inputs(mcfg, generated)
    if separate_meta:
        meta = (ad.input_("Xm", (None, mcfg.D)), ad.input_("Ym", (None, mcfg.c)))
    else:
        meta = (inputs.Xo, inputs.Yo)
    inner = build_inner_loss(theta, alpha, inputs, lcfg, config.force_weight)
    g_theta = ad.grad(inner.loss, list(theta))
    theta_next = {k: theta[k] - config.eta_theta * g_theta[k] for k in theta}
    return StepGraph(inputs, meta, inner.loss, inner.weights, g_theta, theta_next,
                     build_outer_loss(theta, *meta, lcfg),
                     build_outer_loss(theta_next, *meta, lcfg))


class StepResult(NamedTuple):
    theta: dict
    alpha: dict
    inner_loss: float
    outer_before: float
    outer_after: float
    grad_alpha_norm: float
    grad_alpha: dict


class BilevelStep:
    """Compiled inner step + meta step for a fixed configuration."""

    def __init__(self, config: TrainerConfig, generated: bool = True,
                 separate_meta: bool = False):
        self.config = config
        self.graph = build_step_graph(config, generated, separate_meta)
        self.theta_names = list(self.graph.grad_theta)
        self.alpha_names = list(config.model.weightnet_shapes())
        self.learns_alpha = generated and config.force_weight is None
        outputs = [self.graph.inner_loss, self.graph.outer_before, self.graph.outer_after]
        outputs += [self.graph.grad_theta[k] for k in self.theta_names]
        if self.learns_alpha:
            g_alpha = ad.grad(self.graph.outer_after, self.alpha_names)
            outputs += [g_alpha[k] for k in self.alpha_names]
        self.program = ad.Program(outputs)

    def run(self, theta: Mapping[str, np.ndarray], alpha: Mapping[str, np.ndarray],
            bindings: Mapping[str, np.ndarray]) -> StepResult:
        cfg = self.config
        vals = self.program.run({**bindings, **theta, **alpha})
        inner, before, after = (float(v) for v in vals[:3])
        nt = len(self.theta_names)
        new_theta = {k: theta[k] - cfg.eta_theta * g
                     for k, g in zip(self.theta_names, vals[3:3 + nt])}
        if self.learns_alpha:
            g_alpha = dict(zip(self.alpha_names, vals[3 + nt:]))
            stepped = {k: alpha[k] - cfg.eta_alpha * g_alpha[k] for k in self.alpha_names}
            new_alpha = project_unit_ball(stepped, cfg.model.ball_radius)
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in g_alpha.values()))
        else:
            g_alpha = {k: np.zeros_like(alpha[k]) for k in self.alpha_names}
            new_alpha = dict(alpha)
            gnorm = 0.0
        return StepResult(new_theta, new_alpha, inner, before, after, gnorm, g_alpha)


def inner_step(theta, alpha, bindings, config: TrainerConfig) -> tuple[dict, dict]:
    """theta_{t+1} = theta_t - eta_theta * grad L_cls, returned both as arrays and as graphs.

    The graph form keeps its dependence on alpha so :func:`outer_step` can
    differentiate through it.
    """
    generated = "Xg" in bindings
    graph = build_step_graph(config, generated)
    names = list(graph.theta_next)
    prog = ad.Program([graph.grad_theta[k] for k in names])
    vals = prog.run({**bindings, **theta, **alpha})
    for k, g in zip(names, vals):
        if not np.all(np.isfinite(g)):
            raise DivergedRunError(0, f"non-finite gradient for {k}")
    numeric = {k: theta[k] - config.eta_theta * g for k, g in zip(names, vals)}
    return numeric, graph.theta_next


def outer_step(alpha, theta_next_graph: Mapping, theta, bindings, config: TrainerConfig) -> dict:
    """alpha_{t+1} = project(alpha_t - eta_alpha * d L_weight(theta_{t+1}(alpha)) / d alpha)."""
    for k, v in theta_next_graph.items():
        if not isinstance(v, ad.Expression):
            raise ad.DetachedGradientError(
                f"theta_next[{k!r}] is numeric; pass the graph returned by inner_step")
    mcfg = config.model
    X, Y = ad.input_("Xo", (None, mcfg.D)), ad.input_("Yo", (None, mcfg.c))
    outer = build_outer_loss(theta_next_graph, X, Y, config.loss)
    names = list(mcfg.weightnet_shapes())
    grads = ad.second_order_gradient(outer, theta_next_graph, names,
                                     {**bindings, **theta, **alpha})
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedRunError(0, f"non-finite meta-gradient for {k}")
    stepped = {k: alpha[k] - config.eta_alpha * grads[k] for k in names}
    return project_unit_ball(stepped, mcfg.ball_radius)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _sample(n: int, k: int, seed: int, stream: int, t: int) -> np.ndarray:
    if k >= n:
        return np.arange(n)
    return np.sort(rng_for(seed, stream, t).choice(n, size=k, replace=False))


def _meta_split(originals: OriginalDataset, pool: GeneratedPool, fraction: float, seed: int):
    """Hold out a fraction of originals for the outer loss.

    Generated rows whose origin is held out are dropped; the rest are re-indexed
    against the remaining training originals.
    """
    if fraction <= 0:
        return originals, pool, None, np.arange(len(originals))
    rng = rng_for(seed, STREAM_BATCH_ORIGINAL, 2**31)
    perm = rng.permutation(len(originals))
    k = max(1, int(round(fraction * len(originals))))
    keep = np.sort(perm[k:])
    remap = np.full(len(originals), -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    rows = remap[pool.origin_index] >= 0
    hidden = None
    if pool.hidden is not None:
        hidden = HiddenLabels(pool.hidden.true_class[rows], pool.hidden.c)
    kept = GeneratedPool(pool.X[rows], remap[pool.origin_index[rows]], pool.gen_index[rows],
                         hidden)
    return originals.subset(keep), kept, originals.subset(np.sort(perm[:k])), keep


def pool_weights(theta, alpha, originals: OriginalDataset, pool: GeneratedPool,
                 model_cfg: ModelConfig) -> np.ndarray:
    if len(pool) == 0:
        return np.zeros(0)
    _, emb_g, _ = predict(pool.X, theta, model_cfg)
    _, emb_o, _ = predict(originals.X[pool.origin_index], theta, model_cfg)
    return predict_weights(emb_g, emb_o, alpha, model_cfg)


def train(data: TrainData, config: TrainerConfig, mode: str = "trireweight",
          checkpoint_path=None, resume_from=None,
          on_record: Callable[[dict], None] | None = None) -> RunResult:
    """Shared loop behind :func:`train_trireweight` and the two baselines.

    ``mode='sl'`` drops the generated pool; ``mode='nsl'`` trains on originals
    plus unit-weighted generated samples with inherited labels.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    config.validate()
    if mode == "nsl":
        config = config.replace(loss=config.loss.with_flags({"strong"}), force_weight=1.0)
    pool = data.pool.without_hidden()
    if mode == "sl":
        pool = GeneratedPool.empty(data.originals.D)
    originals, pool, meta, kept_originals = _meta_split(data.originals, pool, config.meta_split_fraction,
                                        config.seed)
    generated = len(pool) > 0
    step = BilevelStep(config, generated, separate_meta=meta is not None)

    theta, alpha = init_params(config.model, config.seed)
    metrics = RunMetrics(full_batch=config.full_batch, seed=config.seed, mode=mode)
    t0 = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        theta, alpha = ck["theta"], ck["alpha"]
        t0 = int(ck["state"]["t"])
        metrics = RunMetrics.from_state(ck["state"]["metrics"])

    seed, n_o, n_g = config.seed, len(originals), len(pool)
    b_o = n_o if config.full_batch else config.batch_original
    b_g = n_g if config.full_batch else config.batch_generated
    ckpt_every = config.eval_every * 10
    completed = t0

    def checkpoint(upto: int):
        if checkpoint_path is None:
            return
        state = metrics.state()
        for k in ("trace_t", "trace_outer_before", "trace_outer_after", "trace_grad_alpha_norm"):
            state[k] = state[k][:upto]
        state["records"] = [r for r in state["records"] if r["t"] <= upto]
        save_checkpoint(checkpoint_path, theta, alpha, config.to_dict(), seed,
                        {"t": upto, "mode": mode, "metrics": state})

    try:
        for t in range(t0, config.T):
            draw = 0 if config.full_batch else t
            o_idx = _sample(n_o, b_o, seed, STREAM_BATCH_ORIGINAL, draw)
            if generated:
                g_idx = _sample(n_g, b_g, seed, STREAM_BATCH_GENERATED, draw)
                trip = sample_triplets(pool.origin_index[g_idx], originals,
                                       [seed, STREAM_TRIPLETS, draw])
                Xg = pool.X[g_idx]
                Xgp = perturb(Xg, config.consistency_sigma, [seed, STREAM_PERTURB, draw])
                binds = batch_bindings(originals, o_idx, Xg, Xgp, trip)
            else:
                binds = batch_bindings(originals, o_idx)
            if meta is not None:
                m_idx = _sample(len(meta), b_o, seed, STREAM_BATCH_ORIGINAL, 2**30 + draw)
                binds["Xm"] = meta.X[m_idx]
                binds["Ym"] = onehot(meta.y[m_idx], meta.c)
            try:
                res = step.run(theta, alpha, binds)
            except ad.NumericOverflowError as exc:
                raise DivergedRunError(t, str(exc)) from None
            _guard(res, t, config.divergence_threshold)
            metrics.trace_t.append(t)
            metrics.trace_outer_before.append(res.outer_before)
            metrics.trace_outer_after.append(res.outer_after)
            metrics.trace_grad_alpha_norm.append(res.grad_alpha_norm)
            theta, alpha, completed = res.theta, res.alpha, t + 1

            done = t + 1
            if done % config.eval_every == 0 or done == config.T:
                rec = _record(done, res, theta, alpha, data, originals, pool, config, metrics)
                metrics.records.append(rec)
                if on_record is not None:
                    on_record(rec)
            if done % ckpt_every == 0:
                checkpoint(done)
    except KeyboardInterrupt:
        checkpoint(completed)
        raise

    if generated and config.T > 0:
        w = pool_weights(theta, alpha, originals, pool, config.model)
        metrics.final_weights = {"origin_index": kept_originals[pool.origin_index],
                                 "gen_index": pool.gen_index.copy(), "weight": w}
    if config.T > 0:
        checkpoint(config.T)
    return RunResult(theta, alpha, metrics)


def _guard(res: StepResult, t: int, threshold: float) -> None:
    for name, v in (("L_cls", res.inner_loss), ("L_weight", res.outer_after)):
        if not math.isfinite(v) or v > threshold:
            raise DivergedRunError(t, f"{name}={v}")
    for k, v in {**res.theta, **res.alpha}.items():
        if not np.all(np.isfinite(v)):
            raise DivergedRunError(t, f"parameter {k} is not finite")


def _record(done, res, theta, alpha, data, originals, pool, config, metrics) -> dict:
    mcfg, floor = config.model, config.loss.prob_floor
    tr = evaluate(theta, originals, mcfg, floor)
    rec = {"t": done, "L_cls": res.inner_loss, "L_weight": res.outer_after,
           "train_accuracy": tr["accuracy"], "train_risk": tr["risk"]}
    if data.test is not None and len(data.test):
        te = evaluate(theta, data.test, mcfg, floor)
        rec["test_accuracy"], rec["test_risk"] = te["accuracy"], te["risk"]
    if len(pool):
        w = pool_weights(theta, alpha, originals, pool, mcfg)
        rec["mean_weight"] = float(w.mean())
        metrics.weight_snapshots.append((done, w))
    rec["theta_digest"] = theta_digest(theta)
    return rec


def train_trireweight(data: TrainData, config: TrainerConfig, **kwargs) -> RunResult:
    return train(data, config, "trireweight", **kwargs)


def train_baseline_sl(originals: OriginalDataset, config: TrainerConfig,
                      test: OriginalDataset | None = None, **kwargs) -> RunResult:
    data = TrainData(originals, GeneratedPool.empty(originals.D), test)
    return train(data, config, "sl", **kwargs)


def train_baseline_nsl(originals: OriginalDataset, pool: GeneratedPool, config: TrainerConfig,
                       test: OriginalDataset | None = None, **kwargs) -> RunResult:
    return train(TrainData(originals, pool, test), config, "nsl", **kwargs)


# ---------------------------------------------------------------------------
# ablation over supervision combinations
# ---------------------------------------------------------------------------

ALL_COMBOS: tuple = (
    frozenset({"strong"}),
    frozenset({"pairwise"}),
    frozenset({"strong", "pairwise"}),
    frozenset({"no_connection"}),
    frozenset({"strong", "no_connection"}),
    frozenset({"pairwise", "no_connection"}),
    frozenset({"strong", "pairwise", "no_connection"}),
)


def combo_label(combo) -> str:
    order = ("strong", "pairwise", "no_connection")
    return "+".join(k for k in order if k in combo)


def _ablation_cell(args):
    data, config, combo, seed = args
    if isinstance(data, SimConfig):
        data = TrainData.simulate(data.replace(seed=seed))
    cfg = config.replace(seed=seed, loss=config.loss.with_flags(combo))
    try:
        res = train_trireweight(data, cfg)
    except DivergedRunError as exc:
        return {"combo": combo_label(combo), "seed": seed, "accuracy": None,
                "error": str(exc)}
    test = data.test if data.test is not None else data.originals
    acc = evaluate(res.theta, test, cfg.model, cfg.loss.prob_floor)["accuracy"]
    return {"combo": combo_label(combo), "seed": seed, "accuracy": acc, "error": None}


@dataclass
class AblationTable:
    cells: list

    def summary(self) -> list[dict]:
        rows = []
        for label in dict.fromkeys(c["combo"] for c in self.cells):
            accs = [c["accuracy"] for c in self.cells
                    if c["combo"] == label and c["accuracy"] is not None]
            failed = sum(1 for c in self.cells if c["combo"] == label and c["accuracy"] is None)
            rows.append({"combo": label, "mean": float(np.mean(accs)) if accs else math.nan,
                         "sd": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                         "n": len(accs), "failed": failed})
        return rows

    def mean(self, combo) -> float:
        label = combo if isinstance(combo, str) else combo_label(combo)
        return next(r["mean"] for r in self.summary() if r["combo"] == label)


def run_ablation_matrix(data: TrainData | SimConfig, config: TrainerConfig,
                        combos: Iterable = ALL_COMBOS, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                        jobs: int = 1) -> AblationTable:
    """Test accuracy of every supervision combination under every seed.

    ``data`` may be a fixed :class:`TrainData` or a :class:`SimConfig`, in which
    case each seed simulates its own dataset.
    """
    combos = [frozenset(c) for c in combos]
    for c in combos:
        if not c:
            raise ConfigError("every combo needs at least one supervision flag")
    tasks = [(data, config, c, s) for c in combos for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            cells = list(ex.map(_ablation_cell, tasks))
    else:
        cells = [_ablation_cell(t) for t in tasks]
    return AblationTable(cells)
