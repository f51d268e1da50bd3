"""Network container: layer stack, hyper-parameter record and the model file format."""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import Conv2D, Layer, ShapeError, layer_from_spec

MODEL_FORMAT = "contamdetect/cnn-model"
MODEL_VERSION = 1
INPUT_SHAPE = (1, 120, 120)


def default_architecture() -> list[dict]:
    """Three conv/ReLU/pool stages, a 64-unit hidden layer with dropout, sigmoid output."""
    arch: list[dict] = []
    for filters in (16, 32, 64):
        arch += [{"kind": "conv", "filters": filters, "kernel": 3}, {"kind": "relu"}, {"kind": "maxpool", "window": 2}]
    arch += [
        {"kind": "dense", "units": 64},
        {"kind": "relu"},
        {"kind": "dropout", "rate": 0.5},
        {"kind": "dense", "units": 1},
        {"kind": "sigmoid"},
    ]
    return arch


def light_architecture() -> list[dict]:
    """Smaller net used by the end-to-end benchmark; the 4x4 first pool keeps training cheap."""
    return [
        {"kind": "conv", "filters": 8, "kernel": 5},
        {"kind": "relu"},
        {"kind": "maxpool", "window": 4},
        {"kind": "conv", "filters": 16, "kernel": 3},
        {"kind": "relu"},
        {"kind": "maxpool", "window": 2},
        {"kind": "conv", "filters": 16, "kernel": 3},
        {"kind": "relu"},
        {"kind": "maxpool", "window": 2},
        {"kind": "dense", "units": 32},
        {"kind": "relu"},
        {"kind": "dropout", "rate": 0.5},
        {"kind": "dense", "units": 1},
        {"kind": "sigmoid"},
    ]


@dataclass
class AugmentRanges:
    rotation: float = 20.0  # degrees, symmetric
    shift: float = 10.0  # pixels, symmetric, per axis
    zoom: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        self.zoom = tuple(float(z) for z in self.zoom)
        if self.rotation < 0 or self.shift < 0:
            raise ValueError("rotation and shift ranges must be >= 0")
        if not 0 < self.zoom[0] <= self.zoom[1]:
            raise ValueError(f"zoom range {self.zoom} invalid")


@dataclass
class Hyperparams:
    architecture: list[dict] = field(default_factory=default_architecture)
    alpha: float = 1e-3
    mu: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    class_weights: tuple[float, float] = (1.0, 1.0)  # (w_FC, w_TC)
    augment_copies: int = 3
    augment_ranges: AugmentRanges = field(default_factory=AugmentRanges)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment_ranges, dict):
            self.augment_ranges = AugmentRanges(**self.augment_ranges)
        self.class_weights = tuple(float(w) for w in self.class_weights)
        self.architecture = [dict(s) for s in self.architecture]
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 <= self.mu < 1:
            raise ValueError("mu must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ValueError("class_weights must be two positive reals (w_FC, w_TC)")
        if self.augment_copies < 0:
            raise ValueError("augment_copies must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        d["augment_ranges"]["zoom"] = list(self.augment_ranges.zoom)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


class CnnModel:
    """A built layer stack. ``forward``/``backward`` work on batches shaped (N,) + input_shape."""

    def __init__(self, architecture: list[dict], input_shape=INPUT_SHAPE, seed=0, hyperparams: Hyperparams | None = None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers: list[Layer] = [layer_from_spec(s) for s in architecture]
        self.hyperparams = hyperparams
        if not self.layers or self.layers[-1].kind != "sigmoid":
            raise ValueError("the last layer must be a sigmoid")
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, rng)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            self.shapes.append(shape)
        if shape != (1,):
            raise ValueError(f"network output shape is {shape}, expected (1,)")
        self._version = 0

    @classmethod
    def from_hyperparams(cls, hp: Hyperparams, input_shape=INPUT_SHAPE) -> "CnnModel":
        return cls(hp.architecture, input_shape, seed=hp.seed, hyperparams=hp)

    @property
    def architecture(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat view ``{"<layer>.<name>": array}``; arrays are shared with the layers."""
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        for key, value in params.items():
            i, name = key.split(".")
            layer = self.layers[int(i)]
            if layer.params[name].shape != value.shape:
                raise ShapeError(f"parameter {key}: shape {value.shape} != {layer.params[name].shape}")
            layer.params[name] = np.asarray(value, dtype=np.float64)
        self._version += 1

    def n_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind}): input shape {x.shape[1:]} != {self.input_shape}")
        return x, single

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None):
        """Return (p, cache) where p = P(TC) per sample."""
        x, single = self._batch(x)
        if training and rng is None:
            rng = np.random.default_rng(0)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, training, rng)
            caches.append(c)
        p = x[:, 0]
        cache = {"model": id(self), "version": self._version, "layers": caches, "single": single, "n": len(p)}
        return (p[0] if single else p), cache

    def backward(self, cache: dict, loss_grad, input_grad: bool = True):
        """Gradients of the loss w.r.t. every parameter and the input, given dL/dp.

        Returns (grads, dL/dx); with ``input_grad=False`` the input gradient is
        not computed and None is returned in its place.
        """
        if cache.get("model") != id(self) or cache.get("version") != self._version:
            raise ValueError("stale or foreign forward cache: parameters changed since the forward pass")
        dy = np.asarray(loss_grad, dtype=np.float64).reshape(cache["n"], 1)
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not input_grad:
                if isinstance(layer, Conv2D):
                    dy, g = layer.backward(dy, cache["layers"][i], need_dx=False)
                else:
                    dy, g = layer.backward(dy, cache["layers"][i])
                    dy = None
            else:
                dy, g = layer.backward(dy, cache["layers"][i])
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        if dy is not None and cache["single"]:
            dy = dy[0]
        return grads, dy

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        x, single = self._batch(x)
        out = np.concatenate([self.forward(x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)])
        return out[0] if single else out

    # serialization

    def to_dict(self) -> dict:
        blobs = []
        for key, value in self.parameters().items():
            data = np.ascontiguousarray(value, dtype="<f8").tobytes()
            blobs.append({"name": key, "shape": list(value.shape), "dtype": "<f8", "data": base64.b64encode(data).decode("ascii")})
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "input_shape": list(self.input_shape),
            "layers": self.architecture,
            "parameters": blobs,
            "hyperparams": None if self.hyperparams is None else self.hyperparams.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CnnModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a model file (format {d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        hp = None if d.get("hyperparams") is None else Hyperparams.from_dict(d["hyperparams"])
        model = cls(d["layers"], tuple(d["input_shape"]), hyperparams=hp)
        params = {}
        for blob in d["parameters"]:
            arr = np.frombuffer(base64.b64decode(blob["data"]), dtype=blob["dtype"]).astype(np.float64)
            params[blob["name"]] = arr.reshape(blob["shape"])
        missing = set(model.parameters()) - set(params)
        if missing:
            raise ValueError(f"model file lacks parameters {sorted(missing)}")
        model.set_parameters(params)
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "CnnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))
