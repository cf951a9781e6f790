"""Classifier and weight network graphs, parameter init, projection, checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .datasim import STREAM_INIT, ConfigError, rng_for

Params = dict  # name -> np.ndarray

CHECKPOINT_FORMAT = "trireweight-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    D: int = 16
    c: int = 5
    hidden: int = 32
    weight_hidden: int = 16
    ball_radius: float = 10.0
    weight_input: str = "pairwise"  # or "unary"

    def validate(self) -> "ModelConfig":
        if min(self.D, self.c, self.hidden, self.weight_hidden) < 1:
            raise ConfigError("model widths must be positive")
        if self.ball_radius <= 0:
            raise ConfigError("ball_radius must be > 0")
        if self.weight_input not in ("pairwise", "unary"):
            raise ConfigError(f"weight_input must be 'pairwise' or 'unary', got {self.weight_input!r}")
        return self

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes).validate()

    def classifier_shapes(self) -> dict[str, tuple]:
        return {"W1": (self.D, self.hidden), "b1": (self.hidden,),
                "W2": (self.hidden, self.c), "b2": (self.c,)}

    def weightnet_shapes(self) -> dict[str, tuple]:
        shapes = {"aWa": (self.hidden, self.weight_hidden)}
        if self.weight_input == "pairwise":
            shapes["aWo"] = (self.hidden, self.weight_hidden)
        shapes.update({"ab1": (self.weight_hidden,), "aw2": (self.weight_hidden, 1),
                       "ab2": (1,)})
        return shapes


class ForwardResult(NamedTuple):
    logits: ad.Expression
    probs: ad.Expression
    embedding: ad.Expression


def classifier_leaves(cfg: ModelConfig) -> dict[str, ad.Expression]:
    return {k: ad.param(k, s) for k, s in cfg.classifier_shapes().items()}


def weightnet_leaves(cfg: ModelConfig) -> dict[str, ad.Expression]:
    return {k: ad.param(k, s) for k, s in cfg.weightnet_shapes().items()}


def classifier_forward(x: ad.Expression, theta: Mapping[str, ad.Expression]) -> ForwardResult:
    """Two-layer tanh MLP on a batch ``x`` of shape (B, D)."""
    emb = ad.tanh(x @ theta["W1"] + theta["b1"])
    logits = emb @ theta["W2"] + theta["b2"]
    return ForwardResult(logits, ad.softmax(logits), emb)


def weightnet_forward(anchor_emb: ad.Expression, origin_emb: ad.Expression | None,
                      alpha: Mapping[str, ad.Expression]) -> ad.Expression:
    """Per-row weight in (0, 1), shape (B, 1).  ``origin_emb`` is ignored in unary mode."""
    pre = anchor_emb @ alpha["aWa"] + alpha["ab1"]
    if "aWo" in alpha:
        if origin_emb is None:
            raise ad.ShapeError("pairwise weight net needs the origin embedding")
        pre = pre + origin_emb @ alpha["aWo"]
    hidden = ad.tanh(pre)
    return ad.sigmoid(hidden @ alpha["aw2"] + alpha["ab2"])


def param_norm(params: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for v in params.values()))


def project_unit_ball(alpha: Mapping[str, np.ndarray], radius: float = 1.0) -> Params:
    """Scale ``alpha`` (all arrays together) onto the L2 ball of ``radius`` if outside it."""
    norm = param_norm(alpha)
    if norm <= radius:
        return dict(alpha)
    scale = radius / norm
    return {k: v * scale for k, v in alpha.items()}


def init_params(cfg: ModelConfig, seed: int) -> tuple[Params, Params]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor; alpha then projected."""
    cfg.validate()
    rng = rng_for(seed, STREAM_INIT)
    wn_in = 2 * cfg.hidden if cfg.weight_input == "pairwise" else cfg.hidden
    fan_in = {"W1": cfg.D, "b1": cfg.D, "W2": cfg.hidden, "b2": cfg.hidden,
              "aWa": wn_in, "aWo": wn_in, "ab1": wn_in,
              "aw2": cfg.weight_hidden, "ab2": cfg.weight_hidden}

    def draw(shapes):
        out = {}
        for name, shape in shapes.items():
            s = 1.0 / math.sqrt(fan_in[name])
            out[name] = rng.uniform(-s, s, size=shape)
        return out

    theta = draw(cfg.classifier_shapes())
    alpha = project_unit_ball(draw(cfg.weightnet_shapes()), cfg.ball_radius)
    return theta, alpha


@lru_cache(maxsize=32)
def _forward_program(cfg: ModelConfig) -> ad.Program:
    x = ad.input_("X", (None, cfg.D))
    out = classifier_forward(x, classifier_leaves(cfg))
    return ad.Program([out.probs, out.embedding, out.logits])


def predict(X: np.ndarray, theta: Mapping[str, np.ndarray], cfg: ModelConfig
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Numeric forward pass: (probs, embedding, logits)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.D:
        raise ad.ShapeError(f"expected inputs of shape (n, {cfg.D}), got {X.shape}")
    probs, emb, logits = _forward_program(cfg).run({"X": X, **theta})
    return probs, emb, logits


@lru_cache(maxsize=32)
def _weight_program(cfg: ModelConfig) -> ad.Program:
    a = ad.input_("A", (None, cfg.hidden))
    o = ad.input_("O", (None, cfg.hidden))
    return ad.Program([weightnet_forward(a, o, weightnet_leaves(cfg))])


def predict_weights(anchor_emb: np.ndarray, origin_emb: np.ndarray,
                    alpha: Mapping[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    (w,) = _weight_program(cfg).run({"A": anchor_emb, "O": origin_emb, **alpha})
    return w[:, 0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, theta: Mapping[str, np.ndarray], alpha: Mapping[str, np.ndarray],
                    config: Mapping | None = None, seed: int | None = None,
                    state: Mapping | None = None) -> None:
    """JSON checkpoint; floats are written with repr so values round-trip exactly."""
    def pack(params):
        return {k: {"shape": list(np.shape(v)),
                    "values": [float(x) for x in np.asarray(v, dtype=np.float64).ravel()]}
                for k, v in params.items()}

    doc = {"format": CHECKPOINT_FORMAT, "seed": seed, "config": config or {},
           "theta": pack(theta), "alpha": pack(alpha), "state": state or {}}
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")

    def unpack(block):
        return {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
                for k, v in block.items()}

    doc["theta"] = unpack(doc["theta"])
    doc["alpha"] = unpack(doc["alpha"])
    return doc


def config_dict(cfg) -> dict:
    return asdict(cfg)
