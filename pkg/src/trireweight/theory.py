"""Independent numeric checks of the framework's theoretical claims.

Each check returns a :class:`VerificationReport` whose pass flag is a pure
function of its stored measurements and conditions, so a report reloaded from
JSON re-derives the same verdict.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .datasim import (STREAM_MONTE_CARLO, ConfigError, Geometry, OriginalDataset, SimConfig,
                      augment, cluster_geometry, make_original, rng_for)
from .kernels import floored_ce_all_labels, ranking_quality
from .losses import LossConfig, build_outer_loss, onehot
from .models import ModelConfig, classifier_leaves, init_params, predict
from .trainer import (DivergedRunError, RunResult, TrainData, TrainerConfig, evaluate, theta_digest,
                      train)

_ABS_FLOOR = 1e-12  # absorbs summation rounding when a statistical tolerance is exactly 0

OPS = ("<=", ">=", "<", ">", "abs<=")


@dataclass(frozen=True)
class Condition:
    """``measured[key] op target`` (``abs<=``: ``|measured[key] - target| <= tolerance``)."""

    key: str
    op: str
    target: float
    tolerance: float = 0.0

    def holds(self, measured: Mapping) -> bool:
        v = float(measured[self.key])
        if self.op == "<=":
            return v <= self.target + self.tolerance
        if self.op == ">=":
            return v >= self.target - self.tolerance
        if self.op == "<":
            return v < self.target + self.tolerance
        if self.op == ">":
            return v > self.target - self.tolerance
        if self.op == "abs<=":
            return abs(v - self.target) <= self.tolerance
        raise ValueError(f"unknown comparison {self.op!r}")

    def to_dict(self) -> dict:
        return {"key": self.key, "op": self.op, "target": self.target,
                "tolerance": self.tolerance}


@dataclass
class VerificationReport:
    check: str
    inputs: dict
    measured: dict
    conditions: list
    stderr: float | None = None
    samples: int | None = None
    applicable: bool = True
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for where, block in (("inputs", self.inputs), ("measured", self.measured)):
            _require_finite(block, f"{self.check}.{where}")
        if self.stderr is not None and not math.isfinite(self.stderr):
            raise ValueError(f"{self.check}: stderr must be finite")

    @property
    def passed(self) -> bool:
        return self.applicable and all(c.holds(self.measured) for c in self.conditions)

    @property
    def verdict(self) -> str:
        if not self.applicable:
            return "not-applicable"
        return "pass" if self.passed else "fail"

    @property
    def target(self) -> dict:
        return {c.key: c.target for c in self.conditions}

    @property
    def tolerance(self) -> dict:
        return {c.key: c.tolerance for c in self.conditions}

    def to_dict(self) -> dict:
        return {"check": self.check, "inputs": self.inputs, "measured": self.measured,
                "target": self.target, "tolerance": self.tolerance, "pass": self.passed,
                "stderr": self.stderr, "samples": self.samples, "verdict": self.verdict,
                "conditions": [c.to_dict() for c in self.conditions], "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "VerificationReport":
        return cls(doc["check"], dict(doc["inputs"]), dict(doc["measured"]),
                   [Condition(**c) for c in doc["conditions"]], doc.get("stderr"),
                   doc.get("samples"), doc.get("verdict") != "not-applicable",
                   dict(doc.get("notes", {})))

    def summary_row(self) -> dict:
        return {"check": self.check, "verdict": self.verdict, "pass": self.passed,
                "conditions": "; ".join(f"{c.key} {c.op} {c.target:g}"
                                        + (f" (tol {c.tolerance:g})" if c.tolerance else "")
                                        for c in self.conditions)}


def _require_finite(obj, where: str) -> None:
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return
    if isinstance(obj, (int, float, np.floating, np.integer)):
        if not math.isfinite(float(obj)):
            raise ValueError(f"{where} holds a non-finite value")
        return
    if isinstance(obj, Mapping):
        for k, v in obj.items():
            _require_finite(v, f"{where}.{k}")
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _require_finite(v, f"{where}[{i}]")
        return
    raise TypeError(f"{where}: unsupported value of type {type(obj).__name__}")


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------

def _draw_clean(geo: Geometry, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    c, D = geo.class_means.shape
    y = rng.integers(c, size=n)
    return geo.class_means[y] + rng.standard_normal((n, D)), y


def _draw_noise(geo: Geometry, n: int, rng) -> np.ndarray:
    return geo.extra_mean + rng.standard_normal((n, geo.extra_mean.size))


def _losses_all_labels(X, theta, model_cfg, floor) -> np.ndarray:
    probs, _, _ = predict(X, theta, model_cfg)
    return floored_ce_all_labels(probs, floor)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


# ---------------------------------------------------------------------------
# risk decomposition
# ---------------------------------------------------------------------------

def noisy_risk_direct(theta, model_cfg: ModelConfig, geo: Geometry, gamma: float, n: int,
                      rng, floor: float = 1e-6) -> tuple[float, float]:
    """Monte-Carlo risk under noisy labels: extra-class inputs get a uniform random label."""
    noisy = rng.random(n) < gamma
    k = int(noisy.sum())
    X = np.empty((n, geo.extra_mean.size))
    y = np.empty(n, dtype=np.int64)
    Xc, yc = _draw_clean(geo, n - k, rng)
    X[~noisy], y[~noisy] = Xc, yc
    X[noisy] = _draw_noise(geo, k, rng)
    y[noisy] = rng.integers(geo.class_means.shape[0], size=k)
    losses = _losses_all_labels(X, theta, model_cfg, floor)[np.arange(n), y]
    return _mean_se(losses)


def verify_risk_decomposition(gamma: float, c: int, n_mc: int, theta, model_cfg: ModelConfig,
                              geometry: Geometry, seed: int = 0,
                              prob_floor: float = 1e-6) -> VerificationReport:
    """Noisy-label risk estimated directly vs. as clean risk plus the averaged noise term.

    The two estimates come from independent sample streams; they must agree
    within three combined standard errors.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError("gamma must lie in [0, 1]")
    if n_mc < 10_000:
        raise ConfigError("n_mc must be at least 10^4")
    if geometry.class_means.shape[0] != c or model_cfg.c != c:
        raise ConfigError("class count disagrees with the geometry or model")

    if gamma == 0.0:
        # single-term case: both sides are the clean risk on one sample
        X, y = _draw_clean(geometry, n_mc, rng_for(seed, STREAM_MONTE_CARLO, 0))
        v = _losses_all_labels(X, theta, model_cfg, prob_floor)[np.arange(n_mc), y]
        direct, se_d = _mean_se(v)
        decomposed, se_r, clean_mean, noise_mean, se_c, se_n = direct, se_d, direct, 0.0, se_d, 0.0
    else:
        direct, se_d = noisy_risk_direct(theta, model_cfg, geometry, gamma, n_mc,
                                         rng_for(seed, STREAM_MONTE_CARLO, 1), prob_floor)
        X, y = _draw_clean(geometry, n_mc, rng_for(seed, STREAM_MONTE_CARLO, 2))
        clean_mean, se_c = _mean_se(
            _losses_all_labels(X, theta, model_cfg, prob_floor)[np.arange(n_mc), y])
        Xn = _draw_noise(geometry, n_mc, rng_for(seed, STREAM_MONTE_CARLO, 3))
        noise_mean, se_n = _mean_se(_losses_all_labels(Xn, theta, model_cfg, prob_floor).mean(1))
        decomposed = (1.0 - gamma) * clean_mean + gamma * noise_mean
        se_r = math.hypot((1.0 - gamma) * se_c, gamma * se_n)
    se = math.hypot(se_d, se_r)
    measured = {"direct": direct, "decomposed": decomposed, "difference": direct - decomposed,
                "direct_stderr": se_d, "decomposed_stderr": se_r, "clean_risk": clean_mean,
                "noise_term": noise_mean}
    return VerificationReport(
        "decomposition", {"gamma": gamma, "c": c, "n_mc": n_mc, "seed": seed,
                          "prob_floor": prob_floor},
        measured, [Condition("difference", "abs<=", 0.0, 3.0 * se + _ABS_FLOOR)], se, n_mc)


# ---------------------------------------------------------------------------
# noise risk bound
# ---------------------------------------------------------------------------

def fit_full_batch(X: np.ndarray, y: np.ndarray, model_cfg: ModelConfig, seed: int = 0,
                   eta: float = 0.5, steps: int = 3000, grad_tol: float = 1e-5,
                   prob_floor: float = 1e-6) -> tuple[dict, int]:
    """Full-batch gradient descent on mean floored CE; a proxy for the risk minimizer."""
    theta, _ = init_params(model_cfg, seed)
    leaves = classifier_leaves(model_cfg)
    Xl, Yl = ad.input_("Xo", (None, model_cfg.D)), ad.input_("Yo", (None, model_cfg.c))
    loss = build_outer_loss(leaves, Xl, Yl, LossConfig(prob_floor=prob_floor))
    names = list(leaves)
    g = ad.grad(loss, names)
    prog = ad.Program([loss] + [g[k] for k in names])
    binds = {"Xo": X, "Yo": onehot(y, model_cfg.c)}
    for step in range(steps):
        try:
            vals = prog.run({**binds, **theta})
        except ad.NumericOverflowError as exc:
            raise DivergedRunError(step, str(exc)) from None
        grads = vals[1:]
        gnorm = math.sqrt(sum(float(np.sum(v * v)) for v in grads))
        if not math.isfinite(gnorm) or not math.isfinite(float(vals[0])):
            raise DivergedRunError(step, "non-finite loss or gradient")
        if gnorm <= grad_tol:
            return theta, step
        theta = {k: theta[k] - eta * gk for k, gk in zip(names, grads)}
    return theta, steps


def bayes_uniform_on_noise_probs(X: np.ndarray, geo: Geometry, gamma: float) -> np.ndarray:
    """Class posterior where a class component is most likely, uniform where the extra one is."""
    c = geo.class_means.shape[0]
    d2 = ((X[:, None, :] - geo.class_means[None]) ** 2).sum(-1)
    d2_extra = ((X - geo.extra_mean) ** 2).sum(-1)
    log_class = np.log((1.0 - gamma) / c) - 0.5 * d2
    log_extra = np.log(gamma) - 0.5 * d2_extra if gamma > 0 else np.full(len(X), -np.inf)
    post = np.exp(-0.5 * (d2 - d2.min(1, keepdims=True)))
    post /= post.sum(1, keepdims=True)
    extra = log_extra > log_class.max(1)
    post[extra] = 1.0 / c
    return post


def verify_noise_risk_bound(sim: SimConfig, model_cfg: ModelConfig | None = None,
                            prob_floor: float = 1e-6, n_eval: int = 100_000,
                            construction_offset: float = 12.0, steps: int = 3000,
                            eta: float = 0.5) -> VerificationReport:
    """Clean-risk gap of a noisy-label fit vs. a clean fit, and the uniform-on-noise equality case.

    The noisy training set is the clean one with a ``gamma`` fraction of rows
    replaced by extra-class inputs carrying uniform random labels, so
    ``gamma = 0`` gives identical fits.
    """
    sim.validate()
    gamma, c = sim.gamma, sim.c
    model_cfg = model_cfg or ModelConfig(D=sim.D, c=c)
    A = -math.log(prob_floor)
    geo = cluster_geometry(sim)
    clean = make_original(sim)
    rng = rng_for(sim.seed, STREAM_MONTE_CARLO, 10)
    n = len(clean)
    k = int(round(gamma * n))
    replace_rows = np.sort(rng.permutation(n)[:k])
    Xn, yn = clean.X.copy(), clean.y.copy()
    Xn[replace_rows] = _draw_noise(geo, k, rng)
    yn[replace_rows] = rng.integers(c, size=k)

    theta_star, it_star = fit_full_batch(clean.X, clean.y, model_cfg, sim.seed, eta, steps,
                                         prob_floor=prob_floor)
    theta_noisy, it_noisy = fit_full_batch(Xn, yn, model_cfg, sim.seed, eta, steps,
                                           prob_floor=prob_floor)
    Xe, ye = _draw_clean(geo, n_eval, rng_for(sim.seed, STREAM_MONTE_CARLO, 11))
    rows = np.arange(n_eval)
    l_star = _losses_all_labels(Xe, theta_star, model_cfg, prob_floor)[rows, ye]
    l_noisy = _losses_all_labels(Xe, theta_noisy, model_cfg, prob_floor)[rows, ye]
    gap, se = _mean_se(l_noisy - l_star)
    eps = 3.0 * se + _ABS_FLOOR

    # equality case: a predictor that is uniform on the extra-class region
    wide = sim.replace(extra_class_offset=max(sim.extra_class_offset, construction_offset))
    cgeo = cluster_geometry(wide)
    crng = rng_for(sim.seed, STREAM_MONTE_CARLO, 12)
    noisy = crng.random(n_eval) < gamma
    kk = int(noisy.sum())
    Xc = np.empty((n_eval, sim.D))
    yc = np.empty(n_eval, dtype=np.int64)
    Xc[~noisy], yc[~noisy] = _draw_clean(cgeo, n_eval - kk, crng)
    Xc[noisy] = _draw_noise(cgeo, kk, crng)
    yc[noisy] = crng.integers(c, size=kk)
    probs = bayes_uniform_on_noise_probs(Xc, cgeo, gamma)
    losses = floored_ce_all_labels(probs, prob_floor)[rows, yc]
    r_noisy = float(losses.mean())
    r_clean_part = float(np.where(noisy, 0.0, losses).mean())
    construction_gap, construction_se = _mean_se(np.where(noisy, losses, 0.0))
    target = gamma * math.log(c)

    measured = {"gap": gap, "gap_stderr": se, "bound": gamma * A, "fit_steps_clean": it_star,
                "fit_steps_noisy": it_noisy, "construction_gap": construction_gap,
                "construction_stderr": construction_se,
                "construction_noisy_risk": r_noisy, "construction_clean_part": r_clean_part}
    conditions = [Condition("gap", "<=", gamma * A, eps), Condition("gap", ">=", 0.0, eps)]
    if gamma > 0:
        conditions.append(Condition("construction_gap", "abs<=", target, 0.02 * target))
    return VerificationReport(
        "t41", {"gamma": gamma, "c": c, "A": A, "n_eval": n_eval, "n_train": n,
                "construction_offset": wide.extra_class_offset, "seed": sim.seed},
        measured, conditions, se, n_eval, notes={"construction_target": target})


# ---------------------------------------------------------------------------
# orderings against the two baselines
# ---------------------------------------------------------------------------

@dataclass
class PairedRuns:
    """One seed's trireweight, SL, NSL and forced-zero-weight runs on shared data."""

    originals: OriginalDataset
    trireweight: RunResult
    sl: RunResult
    nsl: RunResult
    zero_weight: RunResult
    model: ModelConfig
    prob_floor: float = 1e-6


def run_paired(data: TrainData, config: TrainerConfig) -> PairedRuns:
    return PairedRuns(data.originals, train(data, config, "trireweight"),
                      train(data, config, "sl"), train(data, config, "nsl"),
                      train(data, config.replace(force_weight=0.0), "trireweight"),
                      config.model, config.loss.prob_floor)


def run_ordering_campaign(sim: SimConfig, config: TrainerConfig,
                          seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> list[PairedRuns]:
    out = []
    for s in seeds:
        data = TrainData.simulate(sim.replace(seed=s))
        out.append(run_paired(data, config.replace(seed=s)))
    return out


def verify_supervision_orderings(runs: Sequence[PairedRuns], tol: float = 1e-3,
                                 required_fraction: float = 0.8,
                                 check: str = "t43") -> VerificationReport:
    """Forced-zero weights reproduce SL exactly; the learned run's training risk is no worse
    than SL or NSL (within ``tol``) on at least ``required_fraction`` of seeds."""
    if not runs:
        raise ConfigError("no runs supplied")
    per_seed = []
    for r in runs:
        seeds = {r.trireweight.metrics.seed, r.sl.metrics.seed, r.nsl.metrics.seed,
                 r.zero_weight.metrics.seed}
        if len(seeds) != 1:
            raise ConfigError(f"runs disagree on seed: {sorted(seeds)}")
        risk = {k: evaluate(getattr(r, k).theta, r.originals, r.model, r.prob_floor)["risk"]
                for k in ("trireweight", "sl", "nsl")}
        same = theta_digest(r.zero_weight.theta) == theta_digest(r.sl.theta) and all(
            np.array_equal(r.zero_weight.theta[k], r.sl.theta[k]) for k in r.sl.theta)
        per_seed.append({"seed": seeds.pop(), "risk_trireweight": risk["trireweight"],
                         "risk_sl": risk["sl"], "risk_nsl": risk["nsl"],
                         "zero_weight_matches_sl": same,
                         "ordering_holds": risk["trireweight"] <= risk["sl"] + tol
                         and risk["trireweight"] <= risk["nsl"] + tol})
    n = len(per_seed)
    need = math.ceil(required_fraction * n - 1e-12)
    measured = {"seeds": n, "ordering_ok": sum(p["ordering_holds"] for p in per_seed),
                "representability_mismatches": sum(not p["zero_weight_matches_sl"]
                                                   for p in per_seed),
                "per_seed": per_seed}
    return VerificationReport(
        check, {"tol": tol, "required_fraction": required_fraction}, measured,
        [Condition("representability_mismatches", "<=", 0), Condition("ordering_ok", ">=", need)],
        samples=n)


# ---------------------------------------------------------------------------
# monotone decrease of the outer objective
# ---------------------------------------------------------------------------

def verify_monotone_descent(metrics, relaxed: bool = False, tol: float = 1e-9,
                            grad_tol: float = 1e-6, min_fraction: float = 0.95
                            ) -> VerificationReport:
    """``L_weight(theta_{t+1}) <= L_weight(theta_t)`` at every iteration of a full-batch run.

    Where the two are equal within ``tol`` the meta-gradient must vanish.  With
    ``relaxed`` (required for stochastic runs) only ``min_fraction`` of steps must
    decrease and the final value must be below the initial one.
    """
    if not metrics.full_batch and not relaxed:
        raise ConfigError("stochastic-run metrics: pass relaxed=True for the 95% check")
    before = np.asarray(metrics.trace_outer_before, dtype=np.float64)
    after = np.asarray(metrics.trace_outer_after, dtype=np.float64)
    gnorm = np.asarray(metrics.trace_grad_alpha_norm, dtype=np.float64)
    if before.size == 0:
        raise ConfigError("metrics hold no iterations")
    # in full-batch mode the next iteration starts from this one's endpoint
    chain_gap = float(np.max(np.abs(before[1:] - after[:-1]))) if before.size > 1 else 0.0
    diff = after - before
    violations = int(np.sum(diff > tol))
    flat = np.abs(diff) <= tol
    flat_with_grad = int(np.sum(flat & (gnorm > grad_tol)))
    measured = {"iterations": int(before.size), "violations": violations,
                "max_increase": float(diff.max()), "fraction_nonincreasing":
                float(np.mean(diff <= tol if not relaxed else diff <= 0.0)),
                "flat_steps": int(flat.sum()), "flat_steps_with_gradient": flat_with_grad,
                "initial": float(before[0]), "final": float(after[-1]),
                "final_minus_initial": float(after[-1] - before[0]), "chain_gap": chain_gap}
    if relaxed:
        conditions = [Condition("fraction_nonincreasing", ">=", min_fraction),
                      Condition("final_minus_initial", "<", 0.0)]
    else:
        conditions = [Condition("violations", "<=", 0),
                      Condition("flat_steps_with_gradient", "<=", 0),
                      Condition("chain_gap", "<=", tol)]
    return VerificationReport("t45", {"relaxed": relaxed, "tol": tol, "grad_tol": grad_tol,
                                      "full_batch": metrics.full_batch},
                              measured, conditions, samples=int(before.size))


# ---------------------------------------------------------------------------
# generalization trend in the number of originals
# ---------------------------------------------------------------------------

def verify_generalization_trend(n_values: Sequence[int], sim: SimConfig, config: TrainerConfig,
                                seeds: Sequence[int] = (0, 1, 2, 3, 4),
                                reference_n: int | None = None,
                                n_test_per_class: int = 4000) -> VerificationReport:
    """Clean-test risk gap to a large-n reference run, averaged over seeds, vs. n originals.

    Passes if the mean gap never increases with n and the log-log slope is <= 0.
    """
    n_values = [int(n) for n in n_values]
    if len(n_values) < 4:
        raise ConfigError("a trend needs at least 4 values of n")
    if any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ConfigError("n_values must be strictly increasing")
    if len(seeds) < 1:
        raise ConfigError("at least one seed is required")
    c = sim.c
    reference_n = reference_n or 4 * n_values[-1]
    if any(n % c or n < 2 * c for n in n_values + [reference_n]):
        raise ConfigError(f"every n must be a multiple of c={c} with at least 2 per class")

    def test_risk(n: int, seed: int) -> float:
        s = sim.replace(seed=seed, n_per_class=n // c, n_test_per_class=n_test_per_class)
        originals = make_original(s)
        data = TrainData(originals, augment(originals, s))
        res = train(data, config.replace(seed=seed))
        return evaluate(res.theta, make_original(s, "reference", n_test_per_class),
                        config.model, config.loss.prob_floor)["risk"]

    gaps = np.empty((len(n_values), len(seeds)))
    for j, seed in enumerate(seeds):
        ref = test_risk(reference_n, seed)
        for i, n in enumerate(n_values):
            gaps[i, j] = test_risk(n, seed) - ref
    mean_gap = gaps.mean(axis=1)
    nonincreasing = bool(np.all(np.diff(mean_gap) <= 0.0))
    positive = bool(np.all(mean_gap > 0))
    if positive:
        fit = stats.linregress(np.log(n_values), np.log(mean_gap))
        dof = len(n_values) - 2
        half = float(stats.t.ppf(0.975, dof) * fit.stderr)
        slope, lo, hi = float(fit.slope), float(fit.slope) - half, float(fit.slope) + half
    else:
        slope = lo = hi = 0.0
    measured = {"n_values": n_values, "mean_gap": mean_gap.tolist(),
                "gap_by_seed": gaps.tolist(), "increases": int(np.sum(np.diff(mean_gap) > 0)),
                "all_gaps_positive": positive, "slope": slope, "slope_ci_low": lo,
                "slope_ci_high": hi, "reference_n": reference_n}
    conditions = [Condition("increases", "<=", 0), Condition("slope", "<=", 0.0)]
    if not positive:
        conditions.append(Condition("all_gaps_positive", ">=", 1))
    return VerificationReport("t44-trend", {"seeds": list(seeds), "T": config.T,
                                            "n_test_per_class": n_test_per_class},
                              measured, conditions, samples=len(seeds) * len(n_values),
                              notes={"reference_slope": -0.5,
                                     "monotone": nonincreasing})


# ---------------------------------------------------------------------------
# separation of clean and noisy generated samples by weight
# ---------------------------------------------------------------------------

def quintile_clean_fractions(weights: np.ndarray, is_noisy: np.ndarray) -> list[float]:
    order = np.argsort(weights, kind="stable")
    return [float(np.mean(~is_noisy[idx])) for idx in np.array_split(order, 5)]


def weight_noise_separation(weights, is_noisy, min_ranking_quality: float = 0.5,
                            max_inversion: float = 0.02) -> VerificationReport:
    """Ranking quality of weights as a clean-vs-noisy score and the quintile clean-fraction trend.

    Passes if ranking quality exceeds ``min_ranking_quality`` and quintile clean
    fractions rise from lowest to highest weight, allowing a single drop of at
    most ``max_inversion``.
    """
    w = np.asarray(weights, dtype=np.float64)
    noisy = np.asarray(is_noisy, dtype=bool)
    if w.shape != noisy.shape:
        raise ad.ShapeError("weights and noise flags must align")
    inputs = {"min_ranking_quality": min_ranking_quality, "max_inversion": max_inversion,
              "samples": int(w.size)}
    if noisy.all() or not noisy.any():
        return VerificationReport("weight-sep", inputs, {"noisy_fraction": float(noisy.mean())
                                                         if w.size else 0.0},
                                  [], samples=int(w.size), applicable=False)
    rq = ranking_quality(w[~noisy], w[noisy])
    fr = quintile_clean_fractions(w, noisy)
    drops = [a - b for a, b in zip(fr, fr[1:]) if b < a]
    bad = int(len(drops) > 1 or any(d > max_inversion for d in drops))
    measured = {"ranking_quality": rq, "quintile_clean_fraction": fr, "inversions": len(drops),
                "largest_inversion": max(drops, default=0.0), "trend_violation": bad,
                "mean_weight_clean": float(w[~noisy].mean()),
                "mean_weight_noisy": float(w[noisy].mean())}
    return VerificationReport(
        "weight-sep", inputs, measured,
        [Condition("ranking_quality", ">" if min_ranking_quality == 0.5 else ">=",
                   min_ranking_quality), Condition("trend_violation", "<=", 0)],
        samples=int(w.size))
