"""Metrics, stratified splits, K-fold cross validation and random hyper-parameter search."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .cnn.layers import ShapeError
from .cnn.model import AugmentRanges, CnnModel, Hyperparams
from .cnn.training import TrainingDivergedError, predict_batch, train

log = logging.getLogger(__name__)


class DegenerateMetricWarning(RuntimeWarning):
    """A metric had a zero denominator and was defined as 0."""


class Metric(float):
    """A float that remembers whether it came from a zero denominator."""

    degenerate: bool

    def __new__(cls, value: float, degenerate: bool = False):
        obj = super().__new__(cls, value)
        obj.degenerate = degenerate
        return obj


@dataclass(frozen=True)
class ConfusionMatrix:
    """(tn, fp, fn, tp); entries are real so cross-fold averages stay exact."""

    tn: float
    fp: float
    fn: float
    tp: float

    def __post_init__(self):
        for name in ("tn", "fp", "fn", "tp"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"confusion matrix entry {name}={v} must be finite and >= 0")

    @property
    def total(self) -> float:
        return self.tn + self.fp + self.fn + self.tp

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        if t.shape != p.shape:
            raise ValueError("y_true and y_pred differ in length")
        return cls(int((~t & ~p).sum()), int((~t & p).sum()), int((t & ~p).sum()), int((t & p).sum()))

    @classmethod
    def mean(cls, cms) -> "ConfusionMatrix":
        cms = list(cms)
        if not cms:
            raise ValueError("no confusion matrices to average")
        a = np.mean([c.as_tuple() for c in cms], axis=0)
        return cls(*(float(v) for v in a))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tn + other.tn, self.fp + other.fp, self.fn + other.fn, self.tp + other.tp)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tn, self.fp, self.fn, self.tp)

    def to_dict(self) -> dict:
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}


def _ratio(num: float, den: float, name: str) -> Metric:
    if den == 0:
        warnings.warn(f"{name}: zero denominator, defined as 0", DegenerateMetricWarning, stacklevel=3)
        return Metric(0.0, True)
    return Metric(num / den)


def precision(cm: ConfusionMatrix) -> Metric:
    return _ratio(cm.tp, cm.tp + cm.fp, "precision")


def recall(cm: ConfusionMatrix) -> Metric:
    return _ratio(cm.tp, cm.tp + cm.fn, "recall")


def accuracy(cm: ConfusionMatrix) -> Metric:
    return _ratio(cm.tp + cm.tn, cm.total, "accuracy")


def f_beta(cm: ConfusionMatrix, beta: float = 2.0) -> Metric:
    if beta <= 0:
        raise ValueError("beta must be > 0")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMetricWarning)
        p, r = precision(cm), recall(cm)
    b2 = beta * beta
    return _ratio((1 + b2) * p * r, b2 * p + r, f"F{beta:g}")


def fp_rate(cm: ConfusionMatrix) -> Metric:
    """FP / (FP + TN): share of clean images flagged."""
    return _ratio(cm.fp, cm.fp + cm.tn, "fp_rate")


def fn_rate(cm: ConfusionMatrix) -> Metric:
    """FN / (FN + TP): share of contaminated images missed."""
    return _ratio(cm.fn, cm.fn + cm.tp, "fn_rate")


@dataclass
class MetricsRow:
    f2: float
    f1: float
    accuracy: float
    precision: float
    recall: float
    cm: ConfusionMatrix
    hyperparams: Hyperparams | None = None
    diverged: bool = False
    degenerate: bool = False
    fold_cms: list[ConfusionMatrix] = field(default_factory=list)

    @classmethod
    def from_cm(cls, cm: ConfusionMatrix, hyperparams=None, fold_cms=()) -> "MetricsRow":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateMetricWarning)
            vals = [f_beta(cm, 2), f_beta(cm, 1), accuracy(cm), precision(cm), recall(cm)]
        return cls(*(float(v) for v in vals), cm=cm, hyperparams=hyperparams,
                   degenerate=any(v.degenerate for v in vals), fold_cms=list(fold_cms))

    @classmethod
    def failed(cls, hyperparams) -> "MetricsRow":
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, ConfusionMatrix(0, 0, 0, 0), hyperparams, diverged=True)

    def flat(self) -> dict:
        d = {"f2": self.f2, "f1": self.f1, "accuracy": self.accuracy, "precision": self.precision,
             "recall": self.recall, **self.cm.to_dict(), "diverged": self.diverged, "degenerate": self.degenerate}
        if self.hyperparams is not None:
            hp = self.hyperparams.to_dict()
            d.update({
                "architecture": json.dumps(hp["architecture"], sort_keys=True),
                "alpha": hp["alpha"], "mu": hp["mu"], "batch_size": hp["batch_size"], "epochs": hp["epochs"],
                "w_fc": hp["class_weights"][0], "w_tc": hp["class_weights"][1],
                "augment_copies": hp["augment_copies"], "seed": hp["seed"],
            })
        return d


@dataclass
class SearchTable:
    rows: list[MetricsRow] = field(default_factory=list)

    def best_index(self) -> int | None:
        """argmax F2; ties go to higher recall, then fewer false positives. Diverged rows never win."""
        ok = [i for i, r in enumerate(self.rows) if not r.diverged]
        if not ok:
            return None
        return max(ok, key=lambda i: (self.rows[i].f2, self.rows[i].recall, -self.rows[i].cm.fp, -i))

    def best(self) -> MetricsRow | None:
        i = self.best_index()
        return None if i is None else self.rows[i]

    def to_csv(self, path) -> None:
        rows = [dict(combination=i, **r.flat()) for i, r in enumerate(self.rows)]
        fields = list(dict.fromkeys(k for r in rows for k in r))
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=fields)
            wr.writeheader()
            wr.writerows(rows)

    def to_json(self, path=None) -> str:
        out = []
        for i, r in enumerate(self.rows):
            d = {k: v for k, v in r.flat().items() if k not in ("architecture",)}
            d["combination"] = i
            d["hyperparams"] = None if r.hyperparams is None else r.hyperparams.to_dict()
            d["fold_cms"] = [c.to_dict() for c in r.fold_cms]
            out.append({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()})
        text = json.dumps({"rows": out, "best": self.best_index()}, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


# splits


def _labels_of(n_or_labels) -> np.ndarray:
    if np.isscalar(n_or_labels):
        return np.zeros(int(n_or_labels), dtype=np.int64)
    return np.asarray(n_or_labels)


def kfold_split(labels, k: int, seed: int) -> list[np.ndarray]:
    """Stratified random partition of ``range(len(labels))`` into ``k`` folds.

    ``labels`` may be an item count for an unstratified split. Classes are
    dealt round-robin, continuing the rotation across classes, so fold sizes
    differ by at most one and per-class counts by at most one.
    """
    labels = _labels_of(labels)
    n = len(labels)
    if k < 2:
        raise ValueError("K must be >= 2")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of items ({n})")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        for j in idx:
            folds[pos % k].append(int(j))
            pos += 1
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def holdout_split(labels, fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train_idx, test_idx) with round(fraction * n) test items."""
    labels = _labels_of(labels)
    n = len(labels)
    if n < 5:
        raise ValueError("holdout split needs at least 5 items")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    n_test = int(round(fraction * n))
    # largest-remainder allocation of the test quota over classes
    quota = counts * n_test / n
    take = np.floor(quota).astype(int)
    for j in np.argsort(-(quota - take), kind="stable")[: n_test - take.sum()]:
        take[j] += 1
    test = []
    for cls, t in zip(classes, take):
        test.extend(rng.permutation(np.flatnonzero(labels == cls))[:t])
    test = np.sort(np.array(test, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(n), test)
    return train_idx, test


# cross validation and search

# train_fn(crops, labels, hp) -> predict_fn(crops) -> 0/1 labels
TrainFn = Callable[[np.ndarray, np.ndarray, Hyperparams], Callable[[np.ndarray], np.ndarray]]


def cnn_train_fn(crops, labels, hp: Hyperparams):
    model = train(crops, labels, hp).model
    return lambda x: (predict_batch(model, x) >= 0.5).astype(np.int64)


def cross_validate(crops, labels, hp: Hyperparams, k: int = 5, seed: int = 0, train_fn: TrainFn = cnn_train_fn) -> MetricsRow:
    """One K-fold pass: train on K-1 folds (augmented inside ``train``), score the held-out fold as is."""
    crops, labels = np.asarray(crops), np.asarray(labels)
    folds = kfold_split(labels, k, seed)
    cms = []
    for i, val in enumerate(folds):
        tr = np.concatenate([f for j, f in enumerate(folds) if j != i])
        predict_fn = train_fn(crops[tr], labels[tr], hp)
        cms.append(ConfusionMatrix.from_labels(labels[val], predict_fn(crops[val])))
        log.info("fold %d/%d: %s", i + 1, k, cms[-1])
    return MetricsRow.from_cm(ConfusionMatrix.mean(cms), hp, cms)


@dataclass
class SearchSpace:
    """Ranges for random search. Architectures are drawn as conv/ReLU/pool stages plus dense layers."""

    n_conv: tuple[int, int] = (2, 3)
    filters: tuple[int, ...] = (8, 16, 32, 64)
    kernels: tuple[int, ...] = (3, 5)
    pools: tuple[int, ...] = (2, 3)
    n_dense: tuple[int, int] = (1, 2)
    units: tuple[int, ...] = (16, 32, 64, 128)
    dropout: tuple[float, float] = (0.0, 0.5)
    alpha: tuple[float, float] = (1e-4, 3e-3)  # log-uniform
    mu: tuple[float, float] = (0.8, 0.95)
    batch_size: tuple[int, ...] = (16, 32, 64)
    epochs: tuple[int, int] = (5, 15)
    class_weights: tuple[tuple[float, float], ...] = ((1.0, 1.0), (1.0, 2.0), (1.0, 5.0), (1.0, 10.0))
    augment_copies: tuple[int, int] = (0, 3)
    augment_ranges: AugmentRanges = field(default_factory=AugmentRanges)
    input_shape: tuple[int, int, int] = (1, 120, 120)

    def __post_init__(self):
        if isinstance(self.augment_ranges, dict):
            self.augment_ranges = AugmentRanges(**self.augment_ranges)
        self.class_weights = tuple(tuple(float(x) for x in w) for w in self.class_weights)
        for name in ("n_conv", "n_dense", "epochs", "augment_copies"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"range {name}={getattr(self, name)} invalid")
        if not 0 < self.alpha[0] <= self.alpha[1]:
            raise ValueError("alpha range must be positive and ordered")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def _architecture(self, rng) -> list[dict]:
        arch = []
        for _ in range(rng.integers(self.n_conv[0], self.n_conv[1] + 1)):
            arch += [{"kind": "conv", "filters": int(rng.choice(self.filters)), "kernel": int(rng.choice(self.kernels))},
                     {"kind": "relu"}, {"kind": "maxpool", "window": int(rng.choice(self.pools))}]
        rate = float(rng.uniform(*self.dropout))
        for _ in range(rng.integers(self.n_dense[0], self.n_dense[1] + 1)):
            arch += [{"kind": "dense", "units": int(rng.choice(self.units))}, {"kind": "relu"}]
            if rate > 0:
                arch.append({"kind": "dropout", "rate": round(rate, 3)})
        return arch + [{"kind": "dense", "units": 1}, {"kind": "sigmoid"}]

    def sample(self, rng: np.random.Generator, seed: int) -> Hyperparams:
        for _ in range(100):
            arch = self._architecture(rng)
            try:
                CnnModel(arch, self.input_shape)  # shape algebra check
            except ShapeError:
                continue
            break
        else:
            raise ValueError("search space yields no architecture compatible with the input shape")
        lo, hi = np.log(self.alpha)
        return Hyperparams(
            architecture=arch,
            alpha=float(np.exp(rng.uniform(lo, hi))),
            mu=float(rng.uniform(*self.mu)),
            batch_size=int(rng.choice(self.batch_size)),
            epochs=int(rng.integers(self.epochs[0], self.epochs[1] + 1)),
            class_weights=self.class_weights[int(rng.integers(len(self.class_weights)))],
            augment_copies=int(rng.integers(self.augment_copies[0], self.augment_copies[1] + 1)),
            augment_ranges=self.augment_ranges,
            seed=seed,
        )


def random_search(space: SearchSpace, l: int, k: int, crops, labels, seed: int = 0,
                  train_fn: TrainFn = cnn_train_fn) -> tuple[SearchTable, Hyperparams | None]:
    """``l`` random combinations, each scored by one K-fold pass; returns the table and the best combination."""
    if l < 1:
        raise ValueError("l must be >= 1")
    rng = np.random.default_rng(seed)
    table = SearchTable()
    for i in range(l):
        hp = space.sample(rng, seed=int(rng.integers(2**31)))
        try:
            row = cross_validate(crops, labels, hp, k, seed, train_fn)
        except TrainingDivergedError as exc:
            log.warning("combination %d diverged: %s", i, exc)
            row = MetricsRow.failed(hp)
        table.rows.append(row)
    best = table.best()
    return table, (None if best is None else best.hyperparams)
