"""Raster primitives: binarization, labeling, blob shape statistics, morphology, crops.

Gray images are ``uint8`` arrays of shape ``(height, width)``; binary images are
``bool`` arrays of the same shape where ``True`` is white.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd
from pathlib import Path
from typing import NamedTuple

import cv2
import numpy as np
from PIL import Image

from ._validation import check_binary_image, check_gray_image

N_LEVELS = 24
DELTA = 255.0 / N_LEVELS

# Variance of a unit square along one axis; added to each diagonal moment so a
# single pixel is an isotropic object.
PIXEL_VARIANCE = 1.0 / 12.0


class InvalidCoordinatesError(ValueError):
    """A detection centre lies outside the image it refers to."""


def threshold_level(k: int) -> float:
    """Gray-level threshold of ladder index ``k`` (``k * 255 / 24``)."""
    return k * DELTA


def binarize(img, th: float) -> np.ndarray:
    """White (``True``) wherever the gray level is strictly below ``th``."""
    if not 0 <= th <= 255:
        raise ValueError(f"threshold must lie in [0, 255], got {th}")
    return check_gray_image(img) < th


@dataclass(frozen=True)
class StructuringElement:
    shape: str = "disk"
    radius: int = 1

    def __post_init__(self):
        if self.shape not in ("disk", "square"):
            raise ValueError(f"unknown structuring element shape {self.shape!r}")
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError("structuring element radius must be an integer >= 1")

    @property
    def kernel(self) -> np.ndarray:
        r = self.radius
        if self.shape == "square":
            return np.ones((2 * r + 1, 2 * r + 1), dtype=np.uint8)
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        return (yy * yy + xx * xx <= r * r).astype(np.uint8)

    def offsets(self) -> np.ndarray:
        """(row, col) offsets of the element's member pixels."""
        rr, cc = np.nonzero(self.kernel)
        return np.stack([rr - self.radius, cc - self.radius], axis=1)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "radius": int(self.radius)}

    @classmethod
    def from_dict(cls, d: dict) -> "StructuringElement":
        return cls(shape=d["shape"], radius=int(d["radius"]))


def dilate(bin_img, se: StructuringElement) -> np.ndarray:
    b = check_binary_image(bin_img).astype(np.uint8)
    out = cv2.dilate(b, se.kernel, borderType=cv2.BORDER_CONSTANT, borderValue=0)
    return out.astype(bool)


def erode(bin_img, se: StructuringElement) -> np.ndarray:
    b = check_binary_image(bin_img).astype(np.uint8)
    out = cv2.erode(b, se.kernel, borderType=cv2.BORDER_CONSTANT, borderValue=0)
    return out.astype(bool)


def closing(bin_img, se: StructuringElement) -> np.ndarray:
    """Dilate then erode with the same element.

    The image is padded with black before dilating so that objects touching
    the border are not eaten by the erosion; the result is the closing of the
    white set on the unbounded plane, restricted to the frame.
    """
    b = check_binary_image(bin_img).astype(np.uint8)
    r = se.radius
    padded = cv2.copyMakeBorder(b, r, r, r, r, cv2.BORDER_CONSTANT, value=0)
    k = se.kernel
    out = cv2.dilate(padded, k, borderType=cv2.BORDER_CONSTANT, borderValue=0)
    out = cv2.erode(out, k, borderType=cv2.BORDER_CONSTANT, borderValue=0)
    return out[r:-r, r:-r].astype(bool)


def opening(bin_img, se: StructuringElement) -> np.ndarray:
    return dilate(erode(bin_img, se), se)


class ShapeStats(NamedTuple):
    area: int
    centroid: tuple[float, float]
    major_axis_len: float
    minor_axis_len: float
    aspect_ratio: float
    solidity: float


@dataclass(eq=False)
class Blob:
    label: int
    area: int
    centroid: tuple[float, float]
    major_axis_len: float
    minor_axis_len: float
    aspect_ratio: float
    solidity: float
    bbox: tuple[int, int, int, int]  # min_row, min_col, max_row + 1, max_col + 1
    pixel_list: np.ndarray = field(repr=False)

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, label: int = 0) -> "Blob":
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        st = shape_stats(pixels)
        lo = pixels.min(axis=0)
        hi = pixels.max(axis=0) + 1
        return cls(
            label=label,
            bbox=(int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])),
            pixel_list=pixels,
            **st._asdict(),
        )

    def shifted(self, drow: int, dcol: int) -> "Blob":
        """Same blob with coordinates translated by ``(drow, dcol)``."""
        r0, c0, r1, c1 = self.bbox
        return Blob(
            label=self.label,
            area=self.area,
            centroid=(self.centroid[0] + drow, self.centroid[1] + dcol),
            major_axis_len=self.major_axis_len,
            minor_axis_len=self.minor_axis_len,
            aspect_ratio=self.aspect_ratio,
            solidity=self.solidity,
            bbox=(r0 + drow, c0 + dcol, r1 + drow, c1 + dcol),
            pixel_list=self.pixel_list + np.array([drow, dcol]),
        )


def _axes_from_moments(mu20, mu02, mu11):
    """Ellipse axis lengths from (pixel-corrected) central moments; vectorized."""
    mu20 = np.asarray(mu20, dtype=float) + PIXEL_VARIANCE
    mu02 = np.asarray(mu02, dtype=float) + PIXEL_VARIANCE
    mu11 = np.asarray(mu11, dtype=float)
    half_trace = 0.5 * (mu20 + mu02)
    disc = np.sqrt(0.25 * (mu20 - mu02) ** 2 + mu11**2)
    lam1 = half_trace + disc
    lam2 = np.maximum(half_trace - disc, PIXEL_VARIANCE)
    return 4.0 * np.sqrt(lam1), 4.0 * np.sqrt(lam2)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices of integer points (monotone chain).

    Collinear points are dropped from the hull boundary; one or two vertices
    are returned for degenerate inputs.
    """
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.int64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.int64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def hull_pixel_count(hull: np.ndarray) -> int:
    """Number of lattice points inside or on a lattice polygon.

    Pick's theorem gives ``interior + boundary = A + B/2 + 1``; a segment or a
    single point falls out of the same formula with ``A = 0``.
    """
    n = len(hull)
    if n == 1:
        return 1
    twice_area = 0
    boundary = 0
    for i in range(n):
        r0, c0 = hull[i]
        r1, c1 = hull[(i + 1) % n]
        twice_area += int(r0) * int(c1) - int(r1) * int(c0)
        boundary += gcd(abs(int(r1 - r0)), abs(int(c1 - c0)))
    return (abs(twice_area) + boundary) // 2 + 1


def shape_stats(pixel_list) -> ShapeStats:
    """Area, centroid, equivalent-ellipse axes, aspect ratio and solidity."""
    pix = np.asarray(pixel_list, dtype=np.int64).reshape(-1, 2)
    if len(pix) == 0:
        raise ValueError("pixel_list is empty")
    area = len(pix)
    rows = pix[:, 0].astype(float)
    cols = pix[:, 1].astype(float)
    rbar, cbar = rows.mean(), cols.mean()
    dr, dc = rows - rbar, cols - cbar
    major, minor = _axes_from_moments((dr * dr).mean(), (dc * dc).mean(), (dr * dc).mean())
    major, minor = float(major), float(minor)
    solidity = area / hull_pixel_count(convex_hull(pix))
    return ShapeStats(
        area=area,
        centroid=(float(rbar), float(cbar)),
        major_axis_len=major,
        minor_axis_len=minor,
        aspect_ratio=major / minor,
        solidity=float(solidity),
    )


def label_image(bin_img) -> tuple[int, np.ndarray]:
    """8-connected labeling. Returns ``(n_labels, labels)`` with 0 as background."""
    b = check_binary_image(bin_img).astype(np.uint8)
    n, labels = cv2.connectedComponents(b, connectivity=8, ltype=cv2.CV_32S)
    return n, labels


def group_pixels(labels: np.ndarray, wanted=None) -> dict[int, np.ndarray]:
    """Map label -> (n, 2) array of member (row, col) coordinates."""
    flat = np.flatnonzero(labels)
    lab = labels.ravel()[flat]
    if wanted is not None:
        keep = np.isin(lab, np.asarray(list(wanted), dtype=lab.dtype))
        flat, lab = flat[keep], lab[keep]
    order = np.argsort(lab, kind="stable")
    flat, lab = flat[order], lab[order]
    ids, starts = np.unique(lab, return_index=True)
    width = labels.shape[1]
    coords = np.stack([flat // width, flat % width], axis=1)
    bounds = list(starts[1:]) + [len(flat)]
    return {int(i): coords[s:e] for i, s, e in zip(ids, starts, bounds)}


def connected_components(bin_img) -> list[Blob]:
    """All 8-connected white blobs with their shape statistics, in label order."""
    _, labels = label_image(bin_img)
    groups = group_pixels(labels)
    return [Blob.from_pixels(pix, label=lab) for lab, pix in groups.items()]


class MomentTable(NamedTuple):
    """Per-label area and equivalent-ellipse axes, computed without pixel lists."""

    area: np.ndarray
    centroid: np.ndarray  # (n, 2)
    major_axis_len: np.ndarray
    minor_axis_len: np.ndarray

    @property
    def aspect_ratio(self) -> np.ndarray:
        return self.major_axis_len / self.minor_axis_len


def moment_table(labels: np.ndarray, n_labels: int) -> MomentTable:
    """Vectorized moments for every label ``1..n_labels-1`` (index 0 unused)."""
    flat = np.flatnonzero(labels)
    lab = labels.ravel()[flat]
    width = labels.shape[1]
    r = (flat // width).astype(float)
    c = (flat % width).astype(float)
    area = np.bincount(lab, minlength=n_labels).astype(float)
    safe = np.maximum(area, 1.0)
    sr = np.bincount(lab, r, n_labels) / safe
    sc = np.bincount(lab, c, n_labels) / safe
    # Central moments from shifted coordinates to limit cancellation.
    dr = r - sr[lab]
    dc = c - sc[lab]
    mu20 = np.bincount(lab, dr * dr, n_labels) / safe
    mu02 = np.bincount(lab, dc * dc, n_labels) / safe
    mu11 = np.bincount(lab, dr * dc, n_labels) / safe
    major, minor = _axes_from_moments(mu20, mu02, mu11)
    return MomentTable(
        area=area.astype(np.int64),
        centroid=np.stack([sr, sc], axis=1),
        major_axis_len=major,
        minor_axis_len=minor,
    )


def crop(img, center, size: int = 120) -> np.ndarray:
    """``size`` x ``size`` window around ``center`` (row, col), edge-replicated.

    A real-valued centre is rounded to the nearest pixel; the centre pixel sits
    at index ``size // 2`` of the window.
    """
    img = check_gray_image(img)
    h, w = img.shape
    r, c = (int(round(float(v))) for v in center)
    if not (0 <= r < h and 0 <= c < w):
        raise InvalidCoordinatesError(f"centre {center} outside image of shape {img.shape}")
    half = size // 2
    rows = np.clip(np.arange(r - half, r - half + size), 0, h - 1)
    cols = np.clip(np.arange(c - half, c - half + size), 0, w - 1)
    return img[np.ix_(rows, cols)]


def read_image(path) -> np.ndarray:
    """Load an 8-bit grayscale PGM (P5) or PNG."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            if im.mode in ("I;16", "I", "F"):
                raise ValueError(f"{path}: only 8-bit images are supported, got mode {im.mode}")
            raise ValueError(f"{path}: expected a grayscale image, got mode {im.mode}")
        return np.array(im.convert("L"), dtype=np.uint8)


def write_image(path, img) -> None:
    """Save as binary PGM or PNG, chosen by suffix."""
    path = Path(path)
    img = check_gray_image(img)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        # Written by hand: deterministic bytes with no encoder metadata.
        h, w = img.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(img).tobytes())
    elif suffix == ".png":
        Image.fromarray(img, mode="L").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format {suffix!r}; use .pgm or .png")
