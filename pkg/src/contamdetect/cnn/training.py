"""Loss, optimizer, augmentation and the mini-batch training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, ClassifierMixin

from .._validation import check_gray_image, check_is_fitted
from .layers import ShapeError
from .model import INPUT_SHAPE, AugmentRanges, CnnModel, Hyperparams, default_architecture

log = logging.getLogger(__name__)

P_EPS = 1e-7
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, what: str = "loss"):
        super().__init__(f"training diverged: non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


def normalize(crops) -> np.ndarray:
    """uint8 crops (n, H, W) -> float64 (n, 1, H, W) in [0, 1]."""
    return (np.asarray(crops, dtype=np.float64) / 255.0)[:, None]


def weighted_bce(p, y, w=(1.0, 1.0)) -> tuple[float, np.ndarray]:
    """Mean weighted binary cross-entropy and its gradient w.r.t. each p.

    ``w`` is (w_FC, w_TC). p is clamped to [1e-7, 1 - 1e-7].
    """
    w_fc, w_tc = w
    p = np.clip(np.atleast_1d(np.asarray(p, dtype=np.float64)), P_EPS, 1 - P_EPS)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    n = len(p)
    losses = -(w_tc * y * np.log(p) + w_fc * (1 - y) * np.log1p(-p))
    grad = -(w_tc * y / p - w_fc * (1 - y) / (1 - p)) / n
    return float(losses.mean()), grad


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adam_step(params, grads, state: OptimizerState, alpha: float, mu: float):
    """One bias-corrected ADAM update (beta1 = mu). Returns (new params, state); the state is updated in place."""
    state.t += 1
    t = state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k], state.v[k] = np.zeros_like(p), np.zeros_like(p)
        m = state.m[k] = mu * state.m[k] + (1 - mu) * g
        v = state.v[k] = ADAM_BETA2 * state.v[k] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - mu**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        out[k] = p - alpha * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out, state


def affine_warp(img, angle: float = 0.0, shift=(0.0, 0.0), zoom: float = 1.0) -> np.ndarray:
    """Rotate by ``angle`` degrees (counter-clockwise on screen), zoom and shift (rows, cols) about the centre.

    Bilinear sampling, edge replication outside the source; returns uint8.
    """
    img = np.asarray(img)
    h, w = img.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    a = math.radians(angle)
    # forward map (row, col): out = zoom * R (in - c) + c + shift
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    inv = rot.T / zoom
    offset = c - inv @ (c + np.asarray(shift, dtype=np.float64))
    out = ndimage.affine_transform(img.astype(np.float64), inv, offset=offset, order=1, mode="nearest")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment(img, rng: np.random.Generator, ranges: AugmentRanges | None = None) -> np.ndarray:
    """Random rotation, shift and zoom drawn uniformly from ``ranges``."""
    r = ranges or AugmentRanges()
    angle = rng.uniform(-r.rotation, r.rotation)
    shift = rng.uniform(-r.shift, r.shift, size=2)
    zoom = rng.uniform(*r.zoom)
    return affine_warp(img, angle, shift, zoom)


def expand_with_augmentation(crops, labels, copies: int, ranges: AugmentRanges, rng) -> tuple[np.ndarray, np.ndarray]:
    """Originals followed by ``copies`` augmented versions of each, generated once."""
    crops = np.asarray(crops)
    labels = np.asarray(labels)
    extra = [augment(c, rng, ranges) for c in crops for _ in range(copies)]
    if not extra:
        return crops, labels
    return np.concatenate([crops, np.stack(extra)]), np.concatenate([labels, np.repeat(labels, copies)])


@dataclass
class TrainResult:
    model: CnnModel
    loss_trace: list[float]


def _check_crops(crops, labels):
    crops = np.asarray(crops)
    labels = np.asarray(labels)
    if crops.ndim != 3 or crops.shape[1:] != INPUT_SHAPE[1:]:
        raise ShapeError(f"crops must be (n, {INPUT_SHAPE[1]}, {INPUT_SHAPE[2]}), got {crops.shape}")
    if crops.dtype != np.uint8:
        crops = np.stack([check_gray_image(c) for c in crops])
    if labels.shape != (len(crops),) or not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be a 0/1 vector matching the crops")
    return crops, labels.astype(np.int64)


def train(crops, labels, hp: Hyperparams, rng: np.random.Generator | None = None, progress=None) -> TrainResult:
    """Mini-batch ADAM on weighted BCE; labels are 1 = TC, 0 = FC.

    The augmented copies are made once before the first epoch. ``progress``,
    if given, is called as progress(epoch, mean_loss).
    """
    crops, labels = _check_crops(crops, labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("training set must contain both TC and FC crops")
    if rng is None:
        rng = np.random.default_rng(hp.seed)
    aug_rng, shuffle_rng, drop_rng = rng.spawn(3)
    x_all, y_all = expand_with_augmentation(crops, labels, hp.augment_copies, hp.augment_ranges, aug_rng)
    model = CnnModel.from_hyperparams(hp, input_shape=(1,) + crops.shape[1:])
    state = OptimizerState.zeros_like(model.parameters())
    trace = []
    n = len(x_all)
    for epoch in range(hp.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, hp.batch_size)):
            idx = order[start : start + hp.batch_size]
            p, cache = model.forward(normalize(x_all[idx]), training=True, rng=drop_rng)
            loss, dp = weighted_bce(p, y_all[idx], hp.class_weights)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, b)
            grads, _ = model.backward(cache, dp, input_grad=False)
            if not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDivergedError(epoch, b, "gradient")
            new, state = adam_step(model.parameters(), grads, state, hp.alpha, hp.mu)
            model.set_parameters(new)
            total += loss * len(idx)
        trace.append(total / n)
        log.debug("epoch %d loss %.5f", epoch, trace[-1])
        if progress is not None:
            progress(epoch, trace[-1])
    return TrainResult(model, trace)


def predict(model: CnnModel, crop) -> tuple[str, float]:
    """Classify one crop: ("TC" | "FC", P(TC)); TC iff p >= 0.5."""
    crop = check_gray_image(crop, name="crop")
    if crop.shape != model.input_shape[1:]:
        raise ShapeError(f"crop is {crop.shape[0]}x{crop.shape[1]}, model expects {model.input_shape[1]}x{model.input_shape[2]}")
    p = float(model.forward(normalize(crop[None]))[0][0])
    return ("TC" if p >= 0.5 else "FC"), p


def predict_batch(model: CnnModel, crops, batch_size: int = 64) -> np.ndarray:
    crops = np.asarray(crops)
    if crops.ndim != 3 or crops.shape[1:] != model.input_shape[1:]:
        raise ShapeError(f"crops must be (n,) + {model.input_shape[1:]}, got {crops.shape}")
    if len(crops) == 0:
        return np.zeros(0)
    return model.predict_proba(normalize(crops), batch_size=batch_size)


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``fit(crops, labels)`` trains a CnnModel; labels are 1 = TC, 0 = FC."""

    def __init__(
        self,
        architecture=None,
        alpha=1e-3,
        mu=0.9,
        batch_size=32,
        epochs=10,
        class_weights=(1.0, 1.0),
        augment_copies=3,
        rotation=20.0,
        shift=10.0,
        zoom=(0.9, 1.1),
        seed=0,
    ):
        self.architecture = architecture
        self.alpha = alpha
        self.mu = mu
        self.batch_size = batch_size
        self.epochs = epochs
        self.class_weights = class_weights
        self.augment_copies = augment_copies
        self.rotation = rotation
        self.shift = shift
        self.zoom = zoom
        self.seed = seed

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            architecture=self.architecture if self.architecture is not None else default_architecture(),
            alpha=self.alpha,
            mu=self.mu,
            batch_size=self.batch_size,
            epochs=self.epochs,
            class_weights=self.class_weights,
            augment_copies=self.augment_copies,
            augment_ranges=AugmentRanges(self.rotation, self.shift, self.zoom),
            seed=self.seed,
        )

    @classmethod
    def from_hyperparams(cls, hp: Hyperparams) -> "CNNClassifier":
        r = hp.augment_ranges
        return cls(hp.architecture, hp.alpha, hp.mu, hp.batch_size, hp.epochs, hp.class_weights,
                   hp.augment_copies, r.rotation, r.shift, r.zoom, hp.seed)

    def fit(self, X, y):
        res = train(X, y, self.hyperparams())
        self.model_ = res.model
        self.loss_trace_ = res.loss_trace
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, ["model_"])
        p = predict_batch(self.model_, X)
        return np.column_stack([1 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
