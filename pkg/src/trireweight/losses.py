"""Loss terms and their composition into the inner (classifier) and outer (weight) objectives.

Graph builders (``*_rows``, :func:`build_inner_loss`, :func:`build_outer_loss`)
return autodiff expressions; the plain functions (:func:`ce_loss`,
:func:`triplet_loss`, :func:`consistency_loss`, :func:`inner_loss`,
:func:`outer_loss`) evaluate those same graphs on concrete arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .datasim import ConfigError, OriginalDataset, TripletBatch
from .models import ModelConfig, classifier_forward, classifier_leaves, weightnet_forward, \
    weightnet_leaves

# keeps sqrt differentiable when an anchor coincides with its positive
_DIST_EPS = 1e-24


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.5
    margin: float = 0.2
    prob_floor: float = 1e-6
    strong: bool = False
    pairwise: bool = True
    no_connection: bool = True
    triplet_space: str = "embedding"  # or "probs"
    consistency_space: str = "probs"  # or "logits"

    def validate(self) -> "LossConfig":
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if not 0.0 < self.prob_floor <= 1e-3:
            raise ConfigError("prob_floor must lie in (0, 1e-3]")
        if self.triplet_space not in ("embedding", "probs"):
            raise ConfigError(f"triplet_space must be 'embedding' or 'probs'")
        if self.consistency_space not in ("probs", "logits"):
            raise ConfigError(f"consistency_space must be 'probs' or 'logits'")
        return self

    def replace(self, **changes) -> "LossConfig":
        return replace(self, **changes).validate()

    @property
    def max_loss(self) -> float:
        """Upper bound A of the floored cross-entropy."""
        return -math.log(self.prob_floor)

    @property
    def flags(self) -> frozenset:
        return frozenset(k for k in ("strong", "pairwise", "no_connection") if getattr(self, k))

    def with_flags(self, flags) -> "LossConfig":
        flags = set(flags)
        unknown = flags - {"strong", "pairwise", "no_connection"}
        if unknown:
            raise ConfigError(f"unknown supervision flags {sorted(unknown)}")
        return self.replace(strong="strong" in flags, pairwise="pairwise" in flags,
                            no_connection="no_connection" in flags)


# ---------------------------------------------------------------------------
# per-row terms, shape (B, 1)
# ---------------------------------------------------------------------------

def ce_rows(probs: ad.Expression, onehot: ad.Expression, floor: float) -> ad.Expression:
    return -ad.sum_(onehot * ad.log(ad.maximum(probs, floor)), axis=-1, keepdims=True)


def distance_rows(a: ad.Expression, b: ad.Expression) -> ad.Expression:
    return ad.sqrt(ad.sq_l2(a - b, axis=-1, keepdims=True) + _DIST_EPS)


def triplet_rows(anchor, positive, negative, margin: float) -> ad.Expression:
    gap = distance_rows(anchor, positive) - distance_rows(anchor, negative) + margin
    return ad.maximum(gap, 0.0)


def consistency_rows(perturbed: ad.Expression, clean: ad.Expression) -> ad.Expression:
    return ad.sq_l2(perturbed - clean, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

class BatchInputs(NamedTuple):
    """Input leaves for one iteration; generated-side leaves are None when absent."""

    Xo: ad.Expression
    Yo: ad.Expression
    Xg: ad.Expression | None = None
    Xgp: ad.Expression | None = None
    Xpos: ad.Expression | None = None
    Xneg: ad.Expression | None = None
    Ypos: ad.Expression | None = None


def batch_inputs(model_cfg: ModelConfig, generated: bool = True) -> BatchInputs:
    D, c = model_cfg.D, model_cfg.c
    Xo, Yo = ad.input_("Xo", (None, D)), ad.input_("Yo", (None, c))
    if not generated:
        return BatchInputs(Xo, Yo)
    return BatchInputs(Xo, Yo, ad.input_("Xg", (None, D)), ad.input_("Xgp", (None, D)),
                       ad.input_("Xpos", (None, D)), ad.input_("Xneg", (None, D)),
                       ad.input_("Ypos", (None, c)))


class InnerLoss(NamedTuple):
    loss: ad.Expression
    weights: ad.Expression | None  # (B, 1), the weight net's output (None without generated)


def build_inner_loss(theta: Mapping[str, ad.Expression], alpha: Mapping[str, ad.Expression],
                     inputs: BatchInputs, cfg: LossConfig,
                     force_weight: float | None = None) -> InnerLoss:
    """mean CE on originals + mean over generated of w * [beta*Phi + (1-beta)*Omega (+ CE)].

    With only one of pairwise/no_connection enabled, that term enters with
    coefficient 1.  Weight-net inputs are detached from the classifier.
    """
    fo = classifier_forward(inputs.Xo, theta)
    loss = ad.mean(ce_rows(fo.probs, inputs.Yo, cfg.prob_floor))
    if inputs.Xg is None:
        return InnerLoss(loss, None)
    if not cfg.flags:
        raise ConfigError("at least one supervision flag is required with generated data")

    fg = classifier_forward(inputs.Xg, theta)
    fpos = classifier_forward(inputs.Xpos, theta)
    terms = []
    if cfg.pairwise:
        fneg = classifier_forward(inputs.Xneg, theta)
        if cfg.triplet_space == "embedding":
            phi = triplet_rows(fg.embedding, fpos.embedding, fneg.embedding, cfg.margin)
        else:
            phi = triplet_rows(fg.probs, fpos.probs, fneg.probs, cfg.margin)
        terms.append(phi)
    if cfg.no_connection:
        fgp = classifier_forward(inputs.Xgp, theta)
        if cfg.consistency_space == "probs":
            omega = consistency_rows(fgp.probs, fg.probs)
        else:
            omega = consistency_rows(fgp.logits, fg.logits)
        terms.append(omega)
    if len(terms) == 2:
        bracket = cfg.beta * terms[0] + (1.0 - cfg.beta) * terms[1]
    else:
        bracket = terms[0] if terms else None
    if cfg.strong:
        strong = ce_rows(fg.probs, inputs.Ypos, cfg.prob_floor)
        bracket = strong if bracket is None else bracket + strong

    w = weightnet_forward(ad.stop_gradient(fg.embedding), ad.stop_gradient(fpos.embedding), alpha)
    scale = w if force_weight is None else ad.constant(float(force_weight))
    return InnerLoss(loss + ad.mean(scale * bracket), w)


def build_outer_loss(theta: Mapping[str, ad.Expression], X: ad.Expression, Y: ad.Expression,
                     cfg: LossConfig) -> ad.Expression:
    """Mean floored cross-entropy on clean originals."""
    return ad.mean(ce_rows(classifier_forward(X, theta).probs, Y, cfg.prob_floor))


# ---------------------------------------------------------------------------
# numeric front ends
# ---------------------------------------------------------------------------

def onehot(y: np.ndarray, c: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    out = np.zeros((y.size, c))
    out[np.arange(y.size), y] = 1.0
    return out


def ce_loss(probs, y: int, prob_floor: float = 1e-6) -> float:
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    c = probs.shape[-1]
    if not 0 <= int(y) < c:
        raise ValueError(f"label {y} out of range for {c} classes")
    P, Y = ad.input_("P", (1, c)), ad.input_("Y", (1, c))
    expr = ad.sum_(ce_rows(P, Y, prob_floor))
    return float(ad.evaluate(expr, {"P": probs, "Y": onehot([y], c)}))


def triplet_loss(anchor, positive, negative, margin: float = 0.2) -> float:
    a, p, n = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (anchor, positive, negative))
    if not a.shape == p.shape == n.shape:
        raise ad.ShapeError("triplet embeddings must have equal lengths")
    dim = a.shape[1]
    A, P, N = (ad.input_(k, (1, dim)) for k in "APN")
    return float(ad.evaluate(ad.sum_(triplet_rows(A, P, N, margin)), {"A": a, "P": p, "N": n}))


def consistency_loss(probs_perturbed, probs_clean) -> float:
    a = np.atleast_2d(np.asarray(probs_perturbed, dtype=np.float64))
    b = np.atleast_2d(np.asarray(probs_clean, dtype=np.float64))
    if a.shape != b.shape:
        raise ad.ShapeError("consistency inputs must have equal lengths")
    A, B = ad.input_("A", a.shape), ad.input_("B", b.shape)
    return float(ad.evaluate(ad.sum_(consistency_rows(A, B)), {"A": a, "B": b}))


def batch_bindings(originals: OriginalDataset, original_idx, gen_X=None, gen_perturbed=None,
                   triplets: TripletBatch | None = None) -> dict[str, np.ndarray]:
    """Arrays for :func:`batch_inputs` leaves.  Generated rows align with ``triplets``."""
    c = originals.c
    out = {"Xo": originals.X[original_idx], "Yo": onehot(originals.y[original_idx], c)}
    if gen_X is not None:
        out.update(Xg=gen_X, Xgp=gen_perturbed, Xpos=originals.X[triplets.positive],
                   Xneg=originals.X[triplets.negative],
                   Ypos=onehot(originals.y[triplets.positive], c))
    return out


def inner_loss(theta, alpha, originals: OriginalDataset, gen_X, gen_perturbed,
               triplets: TripletBatch | None, loss_cfg: LossConfig, model_cfg: ModelConfig,
               force_weight: float | None = None, original_idx=None) -> float:
    """Inner objective on concrete arrays (all originals unless ``original_idx`` is given)."""
    idx = np.arange(len(originals)) if original_idx is None else original_idx
    generated = gen_X is not None and len(gen_X) > 0
    inputs = batch_inputs(model_cfg, generated)
    built = build_inner_loss(classifier_leaves(model_cfg), weightnet_leaves(model_cfg), inputs,
                             loss_cfg, force_weight)
    binds = batch_bindings(originals, idx, gen_X if generated else None, gen_perturbed,
                           triplets)
    return float(ad.evaluate(built.loss, {**binds, **theta, **alpha}))


def outer_loss(theta, originals: OriginalDataset, loss_cfg: LossConfig,
               model_cfg: ModelConfig) -> float:
    if len(originals) == 0:
        raise ValueError("originals must be nonempty")
    X, Y = ad.input_("Xo", (None, model_cfg.D)), ad.input_("Yo", (None, model_cfg.c))
    expr = build_outer_loss(classifier_leaves(model_cfg), X, Y, loss_cfg)
    return float(ad.evaluate(expr, {"Xo": originals.X, "Yo": onehot(originals.y, originals.c),
                                    **theta}))
