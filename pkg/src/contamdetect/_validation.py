"""Input validation helpers shared by the estimators and the raster functions."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_gray_image(img, *, name: str = "img") -> np.ndarray:
    """Return ``img`` as a 2-D ``uint8`` array, raising on anything else.

    Integer inputs outside [0, 255] and non-integral floats are rejected
    rather than silently wrapped.
    """
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (height, width), got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype == bool:
        raise TypeError(f"{name} is boolean; expected gray levels")
    if np.issubdtype(arr.dtype, np.floating):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError(f"{name} has non-integral gray levels")
    elif not np.issubdtype(arr.dtype, np.integer):
        raise TypeError(f"{name} has unsupported dtype {arr.dtype}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(f"{name} gray levels must lie in [0, 255]")
    return arr.astype(np.uint8)


def check_binary_image(bin_img, *, name: str = "bin_img") -> np.ndarray:
    arr = np.asarray(bin_img)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must contain only 0 and 1")
        arr = arr.astype(bool)
    return arr


def check_is_fitted(estimator, attributes) -> None:
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )


def check_random_state(seed) -> np.random.Generator:
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
