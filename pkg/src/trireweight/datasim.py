"""Synthetic originals and a noise-controlled stand-in for a generative augmenter.

Each class of interest is an isotropic unit-variance Gaussian.  The augmenter
returns, per original, ``m`` samples that are either a small Gaussian
perturbation of the original (clean) or a draw from one extra cluster that
belongs to none of the classes (noisy, probability ``gamma``).  Which samples
are noisy is recorded in :class:`HiddenLabels`, which only verification code
is supposed to read.

All randomness is counter-based: every draw comes from a generator seeded by
``(seed, stream, index...)`` so results never depend on generation order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import kernels

# named RNG sub-streams
STREAM_GEOMETRY = 1
STREAM_DATA = 2
STREAM_AUGMENT = 3
STREAM_TRIPLETS = 4
STREAM_PERTURB = 5
STREAM_INIT = 6
STREAM_BATCH_ORIGINAL = 7
STREAM_BATCH_GENERATED = 8
STREAM_MONTE_CARLO = 9

SPLITS = {"train": 0, "test": 1, "reference": 2}


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class InsufficientClassesError(ValueError):
    pass


class SchemaError(ValueError):
    """A CSV file does not match the expected columns."""

    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


def rng_for(seed: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, counters)])


@dataclass(frozen=True)
class SimConfig:
    D: int = 16
    c: int = 5
    n_per_class: int = 40
    m: int = 5
    gamma: float = 0.3
    perturb_sigma: float = 0.5
    class_separation: float = 6.0
    extra_class_offset: float = 6.0
    n_test_per_class: int = 200
    seed: int = 0

    def validate(self) -> "SimConfig":
        if self.D < 2:
            raise ConfigError(f"D must be >= 2, got {self.D}")
        if self.c < 2:
            raise ConfigError(f"c must be >= 2, got {self.c}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.n_per_class < 1 or self.n_test_per_class < 0:
            raise ConfigError("n_per_class must be >= 1 and n_test_per_class >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.perturb_sigma < 0:
            raise ConfigError("perturb_sigma must be >= 0")
        if self.class_separation <= 0:
            raise ConfigError("class_separation must be > 0")
        if self.extra_class_offset <= 0:
            raise ConfigError("extra_class_offset must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        return self

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes).validate()


@dataclass(frozen=True)
class Geometry:
    class_means: np.ndarray  # (c, D)
    extra_mean: np.ndarray  # (D,)


@dataclass
class OriginalDataset:
    X: np.ndarray  # (n, D)
    y: np.ndarray  # (n,), labels 0..c-1
    c: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError("X must be (n, D) and y must be (n,)")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.c):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "OriginalDataset":
        return OriginalDataset(self.X[idx], self.y[idx], self.c)


@dataclass
class HiddenLabels:
    """Ground truth for generated samples; classes 0..c-1, or c for the extra class."""

    true_class: np.ndarray
    c: int

    @property
    def is_noisy(self) -> np.ndarray:
        return self.true_class == self.c


@dataclass
class GeneratedPool:
    X: np.ndarray  # (N, D)
    origin_index: np.ndarray  # (N,)
    gen_index: np.ndarray  # (N,), 0..m-1
    hidden: HiddenLabels | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.X.shape[0]

    def without_hidden(self) -> "GeneratedPool":
        return GeneratedPool(self.X, self.origin_index, self.gen_index, None)

    @classmethod
    def empty(cls, D: int) -> "GeneratedPool":
        return cls(np.zeros((0, D)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


class Triplet(NamedTuple):
    anchor: int  # row in the generated batch
    positive: int  # index into originals
    negative: int  # index into originals


@dataclass
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self) -> int:
        return self.anchor.size

    def __iter__(self) -> Iterator[Triplet]:
        for a, p, n in zip(self.anchor, self.positive, self.negative):
            yield Triplet(int(a), int(p), int(n))


# ---------------------------------------------------------------------------

def cluster_geometry(config: SimConfig) -> Geometry:
    """Class means at pairwise distance >= class_separation; extra mean at
    exactly ``extra_class_offset`` from its nearest class mean."""
    D, c, sep, off = config.D, config.c, config.class_separation, config.extra_class_offset
    if c + 1 <= D and off >= sep / math.sqrt(2.0):
        a = sep / math.sqrt(2.0)
        means = np.zeros((c, D))
        means[np.arange(c), np.arange(c)] = a
        extra = np.zeros(D)
        extra[c] = math.sqrt(off * off - a * a)
        return Geometry(means, extra)

    rng = rng_for(config.seed, STREAM_GEOMETRY)
    radius = sep * max(1.0, math.sqrt(c))
    means = np.zeros((c, D))
    placed = 0
    for _ in range(100_000):
        cand = rng.standard_normal(D)
        cand *= radius / np.linalg.norm(cand)
        if placed == 0 or np.min(np.linalg.norm(means[:placed] - cand, axis=1)) >= sep:
            means[placed] = cand
            placed += 1
            if placed == c:
                break
    else:
        raise ConfigError("could not place class means at the requested separation")
    for _ in range(100_000):
        u = rng.standard_normal(D)
        extra = means[0] + off * u / np.linalg.norm(u)
        if np.min(np.linalg.norm(means - extra, axis=1)) >= off - 1e-12:
            return Geometry(means, extra)
    raise ConfigError("could not place the extra cluster at the requested offset")


def make_original(config: SimConfig, split: str = "train",
                  n_per_class: int | None = None) -> OriginalDataset:
    config.validate()
    n = config.n_per_class if n_per_class is None else n_per_class
    if split == "test" and n_per_class is None:
        n = config.n_test_per_class
    geo = cluster_geometry(config)
    Xs, ys = [], []
    for k in range(config.c):
        rng = rng_for(config.seed, STREAM_DATA, SPLITS[split], k)
        Xs.append(geo.class_means[k] + rng.standard_normal((n, config.D)))
        ys.append(np.full(n, k))
    return OriginalDataset(np.concatenate(Xs), np.concatenate(ys), config.c)


def augment(originals: OriginalDataset, config: SimConfig) -> GeneratedPool:
    """``m`` generated samples per original: clean w.p. 1-gamma, extra-class w.p. gamma."""
    config.validate()
    if len(originals) == 0:
        raise ValueError("originals must be nonempty")
    geo = cluster_geometry(config)
    n, D, m = len(originals), originals.D, config.m
    X = np.empty((n * m, D))
    true_class = np.empty(n * m, dtype=np.int64)
    for i in range(n):
        for j in range(m):
            rng = rng_for(config.seed, STREAM_AUGMENT, i, j)
            row = i * m + j
            noisy = rng.random() < config.gamma
            z = rng.standard_normal(D)
            if noisy:
                X[row] = geo.extra_mean + z
                true_class[row] = config.c
            else:
                X[row] = originals.X[i] + config.perturb_sigma * z
                true_class[row] = originals.y[i]
    origin = np.repeat(np.arange(n), m)
    gen = np.tile(np.arange(m), n)
    return GeneratedPool(X, origin, gen, HiddenLabels(true_class, config.c))


def perturb(x: np.ndarray, sigma: float, seed) -> np.ndarray:
    """``x`` plus N(0, sigma^2 I) noise; ``seed`` may be an int or a counter sequence."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return x + sigma * rng.standard_normal(x.shape)


def sample_triplets(origin_index: np.ndarray, originals: OriginalDataset, seed) -> TripletBatch:
    """One triplet per generated row; the negative is uniform over originals of other classes."""
    origin_index = np.asarray(origin_index, dtype=np.int64)
    labels = originals.y
    classes = np.unique(labels)
    if classes.size < 2:
        raise InsufficientClassesError("triplets need originals from at least two classes")
    rng = np.random.default_rng(seed)
    anchor_labels = labels[origin_index]
    neg = np.empty_like(origin_index)
    u = rng.random(origin_index.size)
    for k in np.unique(anchor_labels):
        pool = np.flatnonzero(labels != k)
        rows = anchor_labels == k
        neg[rows] = pool[np.minimum((u[rows] * pool.size).astype(np.int64), pool.size - 1)]
    return TripletBatch(np.arange(origin_index.size), origin_index, neg)


def measure_triplet_assumption_rate(pool: GeneratedPool, originals: OriginalDataset) -> float:
    """Fraction of generated samples strictly closer to their origin than to any other original."""
    if len(pool) == 0:
        raise ValueError("pool must be nonempty")
    ok = kernels.nearest_is_origin(pool.X, pool.origin_index, originals.X)
    return float(ok.mean())


# ---------------------------------------------------------------------------
# CSV exchange
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_originals_csv(path, data: OriginalDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{k}" for k in range(data.D)] + ["label"])
        for x, y in zip(data.X, data.y):
            w.writerow([_fmt(v) for v in x] + [str(int(y))])


def write_pool_csv(path, pool: GeneratedPool, include_hidden: bool = True) -> None:
    D = pool.X.shape[1]
    header = [f"f{k}" for k in range(D)] + ["origin_index", "gen_index"]
    if include_hidden:
        if pool.hidden is None:
            raise ValueError("pool carries no hidden labels to write")
        header.append("hidden_true_class")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(len(pool)):
            row = [_fmt(v) for v in pool.X[r]]
            row += [str(int(pool.origin_index[r])), str(int(pool.gen_index[r]))]
            if include_hidden:
                row.append(str(int(pool.hidden.true_class[r])))
            w.writerow(row)


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    return rows[0], rows[1:]


def _feature_columns(header: list[str], path) -> int:
    D = 0
    while D < len(header) and header[D] == f"f{D}":
        D += 1
    if D == 0:
        raise SchemaError(f"{path}: expected feature column 'f0' first, got {header[0]!r}",
                          header[0])
    return D


def _parse(rows, col: int, name: str, path, kind):
    try:
        return np.array([kind(r[col]) for r in rows])
    except (ValueError, IndexError):
        raise SchemaError(f"{path}: bad value in column {name!r}", name) from None


def _features(rows, D: int, path) -> np.ndarray:
    X = np.zeros((len(rows), D))
    for i, r in enumerate(rows):
        for k in range(D):
            try:
                X[i, k] = float(r[k])
            except (ValueError, IndexError):
                raise SchemaError(f"{path}: bad value in column 'f{k}' (row {i + 2})",
                                  f"f{k}") from None
    return X


def read_originals_csv(path, c: int | None = None) -> OriginalDataset:
    header, rows = _read_rows(path)
    D = _feature_columns(header, path)
    if header[D:] != ["label"]:
        bad = header[D] if len(header) > D else "label"
        raise SchemaError(f"{path}: expected column 'label' after features, got {bad!r}", bad)
    X = _features(rows, D, path)
    y = _parse(rows, D, "label", path, int).astype(np.int64)
    if c is None:
        c = int(y.max()) + 1 if y.size else 0
    if y.size and (y.min() < 0 or y.max() >= c):
        raise SchemaError(f"{path}: label out of range for {c} classes", "label")
    return OriginalDataset(X, y, c)


def read_pool_csv(path, with_hidden: bool = False, c: int | None = None) -> GeneratedPool:
    """Read a pool CSV.  Hidden labels are loaded only when ``with_hidden`` is set."""
    header, rows = _read_rows(path)
    D = _feature_columns(header, path)
    expected = ["origin_index", "gen_index"]
    for offset, name in enumerate(expected):
        if len(header) <= D + offset or header[D + offset] != name:
            got = header[D + offset] if len(header) > D + offset else "<missing>"
            raise SchemaError(f"{path}: expected column {name!r}, got {got!r}", name)
    extra = header[D + 2:]
    if extra not in ([], ["hidden_true_class"]):
        raise SchemaError(f"{path}: unexpected column {extra[0]!r}", extra[0])
    X = _features(rows, D, path)
    origin = _parse(rows, D, "origin_index", path, int).astype(np.int64)
    gen = _parse(rows, D + 1, "gen_index", path, int).astype(np.int64)
    hidden = None
    if with_hidden:
        if not extra:
            raise SchemaError(f"{path}: no 'hidden_true_class' column", "hidden_true_class")
        tc = _parse(rows, D + 2, "hidden_true_class", path, int).astype(np.int64)
        if c is None:
            raise ValueError("c is required to interpret hidden labels")
        hidden = HiddenLabels(tc, c)
    return GeneratedPool(X, origin, gen, hidden)


def config_fields() -> list[str]:
    return [f.name for f in fields(SimConfig)]
