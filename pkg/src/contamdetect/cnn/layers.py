"""Layer implementations for the crop classifier (NCHW, float64)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.in_shape: tuple | None = None

    def build(self, in_shape: tuple, rng: np.random.Generator) -> tuple:
        """Allocate parameters for ``in_shape`` (without batch axis); return output shape."""
        self.in_shape = tuple(in_shape)
        return self.output_shape(in_shape)

    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def forward(self, x, training, rng):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}


class Conv2D(Layer):
    """Valid cross-correlation with ``filters`` kernels of size ``kernel`` x ``kernel``."""

    kind = "conv"

    def __init__(self, filters: int, kernel: int):
        super().__init__()
        if filters < 1 or kernel < 1:
            raise ValueError("conv needs filters >= 1 and kernel >= 1")
        self.filters, self.kernel = int(filters), int(kernel)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k = self.kernel
        if h < k or w < k:
            raise ShapeError(f"conv {k}x{k}: input {h}x{w} is smaller than the kernel")
        return (self.filters, h - k + 1, w - k + 1)

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        c = in_shape[0]
        fan_in = c * self.kernel * self.kernel
        lim = np.sqrt(6.0 / fan_in)
        self.params = {
            "W": rng.uniform(-lim, lim, size=(self.filters, c, self.kernel, self.kernel)),
            "b": np.zeros(self.filters),
        }
        return out

    # im2col: gather windows once into an (N*Ho*Wo, C*k*k) matrix and use one matmul.

    def forward(self, x, training, rng):
        k, W = self.kernel, self.params["W"]
        n, c, h, w = x.shape
        ho, wo = h - k + 1, w - k + 1
        cols = sliding_window_view(x, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        y = cols @ W.reshape(self.filters, -1).T + self.params["b"]
        return np.ascontiguousarray(y.reshape(n, ho, wo, self.filters).transpose(0, 3, 1, 2)), (x.shape, cols)

    def backward(self, dy, cache, need_dx=True):
        (n, c, h, w), cols = cache
        k, W = self.kernel, self.params["W"]
        ho, wo = h - k + 1, w - k + 1
        dy2 = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.filters)
        grads = {"W": (dy2.T @ cols).reshape(W.shape), "b": dy2.sum(axis=0)}
        if not need_dx:
            return None, grads
        dcols = (dy2 @ W.reshape(self.filters, -1)).reshape(n, ho, wo, c, k, k)
        dx = np.zeros((n, h, w, c))
        for i in range(k):
            for j in range(k):
                dx[:, i : i + ho, j : j + wo, :] += dcols[..., i, j]
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), grads

    def spec(self):
        return {"kind": self.kind, "filters": self.filters, "kernel": self.kernel}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, rng):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, mask):
        return dy * mask, {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, training, rng):
        # Split by sign so neither branch overflows.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, out

    def backward(self, dy, out):
        return dy * out * (1.0 - out), {}


class MaxPool(Layer):
    """Non-overlapping ``window`` x ``window`` max pooling; remainders are dropped."""

    kind = "maxpool"

    def __init__(self, window: int):
        super().__init__()
        if window < 1:
            raise ValueError("pool window must be >= 1")
        self.window = int(window)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        m = self.window
        if h < m or w < m:
            raise ShapeError(f"maxpool {m}x{m}: input {h}x{w} is smaller than the window")
        return (c, h // m, w // m)

    def forward(self, x, training, rng):
        n, c, h, w = x.shape
        m = self.window
        ho, wo = h // m, w // m
        blocks = x[:, :, : ho * m, : wo * m].reshape(n, c, ho, m, wo, m).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, ho, wo, m * m)
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, cache):
        shape, idx = cache
        n, c, h, w = shape
        m = self.window
        ho, wo = h // m, w // m
        grad = np.zeros((n, c, ho, wo, m * m))
        np.put_along_axis(grad, idx[..., None], dy[..., None], axis=-1)
        grad = grad.reshape(n, c, ho, wo, m, m).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * m, wo * m)
        dx = np.zeros(shape)
        dx[:, :, : ho * m, : wo * m] = grad
        return dx, {}

    def spec(self):
        return {"kind": self.kind, "window": self.window}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at training time."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = float(rate)

    def forward(self, x, training, rng):
        if not training or self.rate == 0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, dy, keep):
        return (dy if keep is None else dy * keep), {}

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}


class Dense(Layer):
    """Fully connected layer; flattens its input."""

    kind = "dense"

    def __init__(self, units: int):
        super().__init__()
        if units < 1:
            raise ValueError("dense needs units >= 1")
        self.units = int(units)

    def output_shape(self, in_shape):
        return (self.units,)

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        fan_in = int(np.prod(in_shape))
        lim = np.sqrt(6.0 / fan_in)
        self.params = {"W": rng.uniform(-lim, lim, size=(fan_in, self.units)), "b": np.zeros(self.units)}
        return out

    def forward(self, x, training, rng):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["W"] + self.params["b"], (x.shape, flat)

    def backward(self, dy, cache):
        shape, flat = cache
        dW = flat.T @ dy
        db = dy.sum(axis=0)
        dx = (dy @ self.params["W"].T).reshape(shape)
        return dx, {"W": dW, "b": db}

    def spec(self):
        return {"kind": self.kind, "units": self.units}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, ReLU, Sigmoid, MaxPool, Dropout, Dense)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**spec)
