"""Multi-threshold shape filter: candidate contamination proposals and their calibration.

An image is binarized at a ladder of gray thresholds. At every level the white
objects are closed morphologically, filtered by area / aspect ratio / solidity
intervals, thinned by a neighbour-density test (distances to every blob at
that level, so clustered specks count against each other) and finally
checked for shape stability at the next threshold up. Survivors of all levels are merged into a
single list of :class:`Detection`.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from . import imaging
from ._validation import check_gray_image, check_is_fitted
from .imaging import DELTA, N_LEVELS, Blob, StructuringElement

logger = logging.getLogger(__name__)

PROFILE_SCHEMA = "contamdetect/calibration-profile/1"
MAX_INDEX = N_LEVELS - 1


@dataclass(frozen=True)
class ThresholdLadder:
    """Threshold indices ``k_l <= k < k_u``; level ``k`` is ``k * 255 / 24``."""

    k_l: int
    k_u: int

    def __post_init__(self):
        if not (0 <= self.k_l < self.k_u <= MAX_INDEX):
            raise ValueError(f"ladder needs 0 <= k_l < k_u <= {MAX_INDEX}, got [{self.k_l}, {self.k_u})")

    delta = DELTA

    @property
    def indices(self) -> range:
        return range(self.k_l, self.k_u)

    @property
    def levels(self) -> list[float]:
        return [k * DELTA for k in self.indices]


@dataclass(frozen=True)
class ShapeInterval:
    mean: float
    std: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")
        if self.std < 0:
            raise ValueError("std must be non-negative")

    @classmethod
    def from_samples(cls, values, floor: float = 0.0, ceil: float = math.inf, z: float = 2.0) -> "ShapeInterval":
        """Mean +/- ``z`` sample standard deviations, clamped to ``[floor, ceil]``."""
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            raise ValueError("no samples")
        mu = float(v.mean())
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        lo = max(floor, mu - z * sd)
        hi = min(ceil, mu + z * sd)
        return cls(mu, sd, min(lo, hi), hi)

    def contains(self, x):
        return (np.asarray(x) >= self.lo) & (np.asarray(x) <= self.hi)

    def widened(self, factor: float) -> "ShapeInterval":
        half = 0.5 * (self.hi - self.lo) * factor
        mid = 0.5 * (self.hi + self.lo)
        return replace(self, lo=mid - half, hi=mid + half)


@dataclass(frozen=True)
class ShapeProfile:
    """Shape intervals valid for threshold indices ``k_min <= k <= k_max``."""

    area: ShapeInterval
    ratio: ShapeInterval
    solidity: ShapeInterval
    k_min: int = 0
    k_max: int = MAX_INDEX
    kind: str | None = None

    def covers(self, k: int) -> bool:
        return self.k_min <= k <= self.k_max

    def accepts(self, area, ratio, solidity):
        return self.area.contains(area) & self.ratio.contains(ratio) & self.solidity.contains(solidity)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "k_min": self.k_min,
            "k_max": self.k_max,
            **{name: vars(getattr(self, name)) for name in ("area", "ratio", "solidity")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeProfile":
        return cls(
            area=ShapeInterval(**d["area"]),
            ratio=ShapeInterval(**d["ratio"]),
            solidity=ShapeInterval(**d["solidity"]),
            k_min=int(d["k_min"]),
            k_max=int(d["k_max"]),
            kind=d.get("kind"),
        )


@dataclass(frozen=True)
class CalibrationProfile:
    ladder: ThresholdLadder
    shapes: tuple[ShapeProfile, ...]
    se: StructuringElement
    d0: float
    area_growth_max: float
    axis_growth_max: float
    neighborhood_size: int = 120
    merge_radius: float = 10.0

    def __post_init__(self):
        if not self.shapes:
            raise ValueError("profile needs at least one set of shape intervals")
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")
        if self.area_growth_max < 1 or self.axis_growth_max < 1:
            raise ValueError("growth bounds must be >= 1")
        object.__setattr__(self, "shapes", tuple(self.shapes))

    # Convenience views for the single-interval (global) case.
    @property
    def area_iv(self) -> ShapeInterval:
        return self.shapes[0].area

    @property
    def ratio_iv(self) -> ShapeInterval:
        return self.shapes[0].ratio

    @property
    def solidity_iv(self) -> ShapeInterval:
        return self.shapes[0].solidity

    def shapes_at(self, k: int) -> list[ShapeProfile]:
        return [s for s in self.shapes if s.covers(k)]

    def to_dict(self) -> dict:
        return {
            "schema": PROFILE_SCHEMA,
            "ladder": {"k_l": self.ladder.k_l, "k_u": self.ladder.k_u},
            "shapes": [s.to_dict() for s in self.shapes],
            "se": self.se.to_dict(),
            "d0": self.d0,
            "area_growth_max": self.area_growth_max,
            "axis_growth_max": self.axis_growth_max,
            "neighborhood_size": self.neighborhood_size,
            "merge_radius": self.merge_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProfile":
        if d.get("schema") != PROFILE_SCHEMA:
            raise ValueError(f"unsupported profile schema {d.get('schema')!r}; expected {PROFILE_SCHEMA!r}")
        return cls(
            ladder=ThresholdLadder(**d["ladder"]),
            shapes=tuple(ShapeProfile.from_dict(s) for s in d["shapes"]),
            se=StructuringElement.from_dict(d["se"]),
            d0=float(d["d0"]),
            area_growth_max=float(d["area_growth_max"]),
            axis_growth_max=float(d["axis_growth_max"]),
            neighborhood_size=int(d["neighborhood_size"]),
            merge_radius=float(d["merge_radius"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Verdict(str, Enum):
    CANDIDATE = "candidate"
    TRUE_CONTAMINATION = "true_contamination"
    FALSE_ALARM = "false_alarm"


@dataclass
class Detection:
    centroid: tuple[float, float]
    threshold_index: int
    blob: Blob
    kind_hint: str | None = None
    verdict: Verdict = Verdict.CANDIDATE
    probability: float | None = None

    def resolve(self, verdict: Verdict, probability: float | None = None) -> "Detection":
        """Copy with a terminal verdict; only candidates can be resolved."""
        verdict = Verdict(verdict)
        if self.verdict is not Verdict.CANDIDATE:
            raise ValueError(f"detection already resolved as {self.verdict.value}")
        if verdict is Verdict.CANDIDATE:
            raise ValueError("resolve() needs a terminal verdict")
        return replace(self, verdict=verdict, probability=probability)

    def to_dict(self) -> dict:
        b = self.blob
        return {
            "row": self.centroid[0],
            "col": self.centroid[1],
            "threshold_index": self.threshold_index,
            "kind_hint": self.kind_hint,
            "verdict": self.verdict.value,
            "probability": self.probability,
            "area": b.area,
            "aspect_ratio": b.aspect_ratio,
            "solidity": b.solidity,
            "major_axis_len": b.major_axis_len,
            "bbox": list(b.bbox),
        }


@dataclass(frozen=True)
class Contamination:
    row: float
    col: float
    kind: str


@dataclass
class GroundTruthAnnotation:
    image: str
    contaminations: list[Contamination] = field(default_factory=list)
    shape: tuple[int, int] | None = None

    def validate(self, shape=None) -> None:
        shape = shape or self.shape
        if shape is None:
            return
        h, w = shape
        for c in self.contaminations:
            if not (0 <= c.row < h and 0 <= c.col < w):
                raise ValueError(f"{self.image}: contamination at ({c.row}, {c.col}) outside {shape}")

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "contaminations": [{"row": c.row, "col": c.col, "kind": c.kind} for c in self.contaminations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthAnnotation":
        return cls(
            image=d["image"],
            contaminations=[Contamination(float(c["row"]), float(c["col"]), str(c["kind"])) for c in d["contaminations"]],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruthAnnotation":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- stages


def density_filter(blobs: Sequence[Blob], d0: float) -> list[Blob]:
    """Keep blobs whose mean distance to their ``min(3, n-1)`` nearest neighbours is >= ``d0``."""
    if d0 <= 0:
        raise ValueError("d0 must be positive")
    blobs = list(blobs)
    keep = _density_scores(np.array([b.centroid for b in blobs]).reshape(-1, 2)) >= d0
    return [b for b, k in zip(blobs, keep) if k]


def _density_scores(centroids: np.ndarray) -> np.ndarray:
    """Mean nearest-neighbour distance per point; ``inf`` when there are no neighbours."""
    return density_scores(centroids, centroids)


def growth_ratios(img: np.ndarray, blob: Blob, k: int, se: StructuringElement | None,
                  neighborhood_size: int = 120) -> tuple[float, float]:
    """Area and major-axis growth of ``blob`` when its neighbourhood is re-binarized at level ``k + 1``.

    The window is centred on the blob centroid, enlarged if needed to hold the
    blob plus a closing margin, and clipped to the image.
    """
    if k + 1 > MAX_INDEX:
        raise ValueError(f"no higher threshold above index {k}")
    h, w = img.shape
    half = neighborhood_size // 2
    margin = 2 * (se.radius if se else 0) + 1
    cr, cc = (int(round(v)) for v in blob.centroid)
    r0, c0, r1, c1 = blob.bbox
    top = max(0, min(cr - half, r0 - margin))
    left = max(0, min(cc - half, c0 - margin))
    bottom = min(h, max(cr - half + neighborhood_size, r1 + margin))
    right = min(w, max(cc - half + neighborhood_size, c1 + margin))
    sub = img[top:bottom, left:right] < (k + 1) * DELTA
    if se is not None:
        sub = imaging.closing(sub, se)
    _, labels = imaging.label_image(sub)
    local = blob.pixel_list - np.array([top, left])
    hit = labels[local[:, 0], local[:, 1]]
    hit = hit[hit > 0]
    if hit.size == 0:
        raise AssertionError("blob vanished at a higher threshold; binarization is not monotone")
    grown_label = np.bincount(hit).argmax()
    grown = np.argwhere(labels == grown_label)
    table = imaging.moment_table((labels == grown_label).astype(np.int32), 2)
    grown_major = float(table.major_axis_len[1])
    return len(grown) / blob.area, grown_major / blob.major_axis_len


def stability_check(img, det: Detection, profile: CalibrationProfile) -> bool:
    img = check_gray_image(img)
    a, m = growth_ratios(img, det.blob, det.threshold_index, profile.se, profile.neighborhood_size)
    return a <= profile.area_growth_max and m <= profile.axis_growth_max


class _LabeledLevel:
    """Components of one closed binarization; blobs and density lookups are memoized per label."""

    def __init__(self, img: np.ndarray, k: int, se: StructuringElement | None):
        white = img < k * DELTA
        if se is not None:
            white = imaging.closing(white, se)
        self.n, self.labels, self.stats, cents = cv2.connectedComponentsWithStats(
            white.astype(np.uint8), connectivity=8, ltype=cv2.CV_32S)
        self.everyone = cents[1:, ::-1].copy()  # cv2 gives (x, y)
        self._ratio = None
        self._blobs: dict[int, Blob] = {}
        self._tree = None

    def candidates(self, active: Sequence[ShapeProfile]) -> list[tuple[Blob, str | None]]:
        if self.n <= 1 or not active:
            return []
        area = self.stats[:, cv2.CC_STAT_AREA]
        ok = np.zeros(self.n, dtype=bool)
        for s in active:
            ok |= s.area.contains(area)
        ok[0] = False
        if not ok.any():
            return []
        # Cheap moment prefilter on the aspect ratio; tolerance keeps it conservative.
        if self._ratio is None:
            self._ratio = imaging.moment_table(self.labels, self.n).aspect_ratio
        ok_ratio = np.zeros(self.n, dtype=bool)
        for s in active:
            ok_ratio |= (self._ratio >= s.ratio.lo - 1e-9) & (self._ratio <= s.ratio.hi + 1e-9)
        wanted = np.flatnonzero(ok & ok_ratio).tolist()
        missing = [lab for lab in wanted if lab not in self._blobs]
        if missing:
            groups = imaging.group_pixels(self.labels, missing)
            for lab in missing:
                self._blobs[lab] = Blob.from_pixels(groups[lab], label=lab)
        out = []
        for lab in wanted:
            blob = self._blobs[lab]
            for s in active:
                if s.accepts(blob.area, blob.aspect_ratio, blob.solidity):
                    out.append((blob, s.kind))
                    break
        return out

    def density(self, blobs: Sequence[Blob]) -> np.ndarray:
        """Density scores of ``blobs`` against every component at this level."""
        n = len(self.everyone)
        if n <= 1 or not blobs:
            return np.full(len(blobs), np.inf)
        if self._tree is None:
            self._tree = cKDTree(self.everyone)
        m = min(3, n - 1)
        dist, _ = self._tree.query(np.array([b.centroid for b in blobs], dtype=float), k=m + 1)
        return np.sort(dist, axis=1)[:, 1:].mean(axis=1)


def _level_candidates(img: np.ndarray, k: int, shapes: Sequence[ShapeProfile],
                      se: StructuringElement | None) -> tuple[list[tuple[Blob, str | None]], np.ndarray]:
    """Shape-passing blobs at level ``k`` plus the centroids of every blob at that level."""
    active = [s for s in shapes if s.covers(k)]
    if not active:
        return [], np.empty((0, 2))
    level = _LabeledLevel(img, k, se)
    return level.candidates(active), level.everyone


def shape_candidates(img: np.ndarray, k: int, shapes: Sequence[ShapeProfile],
                     se: StructuringElement | None) -> list[tuple[Blob, str | None]]:
    """Blobs at level ``k`` (after closing) that fall inside some shape profile."""
    return _level_candidates(img, k, shapes, se)[0]


def density_scores(points: np.ndarray, population: np.ndarray) -> np.ndarray:
    """Mean distance from each of ``points`` to its ``min(3, n-1)`` nearest other members of ``population``.

    ``points`` must be members of ``population`` (n rows); ``inf`` when n <= 1.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(population)
    if n <= 1 or len(points) == 0:
        return np.full(len(points), np.inf)
    m = min(3, n - 1)
    dist, _ = cKDTree(population).query(points, k=m + 1)
    # The nearest hit is the point itself (distance 0).
    return np.sort(dist, axis=1)[:, 1:].mean(axis=1)


@dataclass
class LevelResult:
    """Per-threshold trace of the filter stages."""

    k: int
    shape_passed: list[tuple[Blob, str | None]]
    density_passed: list[tuple[Blob, str | None]]
    growth: list[tuple[float, float]]
    detections: list[Detection]


def scan_level(img: np.ndarray, k: int, profile: CalibrationProfile) -> LevelResult:
    img = check_gray_image(img)
    cands, everyone = _level_candidates(img, k, profile.shapes, profile.se)
    scores = density_scores([b.centroid for b, _ in cands], everyone)
    dense_ok = [c for c, s in zip(cands, scores) if s >= profile.d0]
    growth = [growth_ratios(img, b, k, profile.se, profile.neighborhood_size) for b, _ in dense_ok]
    dets = [
        Detection(centroid=b.centroid, threshold_index=k, blob=b, kind_hint=kind)
        for (b, kind), (ga, gm) in zip(dense_ok, growth)
        if ga <= profile.area_growth_max and gm <= profile.axis_growth_max
    ]
    return LevelResult(k, cands, dense_ok, growth, dets)


def merge_detections(dets: Iterable[Detection], radius: float) -> list[Detection]:
    """Drop detections within ``radius`` of an already kept one, lowest threshold first."""
    ordered = sorted(dets, key=lambda d: (d.threshold_index, d.centroid[0], d.centroid[1]))
    kept: list[Detection] = []
    for d in ordered:
        if all(math.dist(d.centroid, o.centroid) > radius for o in kept):
            kept.append(d)
    return kept


def detect(img, profile: CalibrationProfile) -> list[Detection]:
    """Run the full multi-threshold filter; returns candidates sorted by position."""
    img = check_gray_image(img)
    found = []
    for k in profile.ladder.indices:
        found.extend(scan_level(img, k, profile).detections)
    merged = merge_detections(found, profile.merge_radius)
    return sorted(merged, key=lambda d: (d.centroid[0], d.centroid[1]))


# --------------------------------------------------------------------------- calibration


@dataclass
class CalibrationConfig:
    """Search ranges for the trial-and-error part of the calibration."""

    structuring_elements: tuple[StructuringElement, ...] = (
        StructuringElement("disk", 1),
        StructuringElement("square", 1),
        StructuringElement("disk", 2),
    )
    d0_grid: tuple[float, ...] = (1.0, 5.0, 10.0, 20.0, 40.0)
    area_growth_grid: tuple[float, ...] = (1.25, 1.5, 2.0, 3.0, 5.0)
    axis_growth_grid: tuple[float, ...] = (1.1, 1.25, 1.5, 2.0, 3.0)
    interval_modes: tuple[str, ...] = ("global", "kind")
    interval_sigmas: tuple[float, ...] = (2.0, 2.5, 3.0)
    neighborhood_size: int = 120
    merge_radius: float = 10.0
    match_radius: float = 6.0

    def to_dict(self) -> dict:
        d = {k: v for k, v in vars(self).items()}
        d["structuring_elements"] = [s.to_dict() for s in self.structuring_elements]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        d = dict(d)
        if "structuring_elements" in d:
            d["structuring_elements"] = tuple(StructuringElement.from_dict(s) for s in d["structuring_elements"])
        for key in ("d0_grid", "area_growth_grid", "axis_growth_grid", "interval_modes", "interval_sigmas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class UncalibratableWarning(UserWarning):
    """Some annotated contaminations cannot be segmented by any usable threshold."""


def first_visible_index(gray_level: int) -> int:
    """Smallest ladder index whose threshold exceeds ``gray_level``."""
    return int(math.floor(gray_level / DELTA)) + 1


def _sample_blob(img, row, col, k, se, cache=None) -> Blob | None:
    """Blob under (row, col) at level ``k`` after closing; None if that pixel is black."""
    key = (id(img), k, se)
    if cache is not None and key in cache:
        labels = cache[key]
    else:
        white = img < k * DELTA
        if se is not None:
            white = imaging.closing(white, se)
        _, labels = imaging.label_image(white)
        if cache is not None:
            cache[key] = labels
    lab = labels[int(round(row)), int(round(col))]
    if lab == 0:
        return None
    return Blob.from_pixels(np.argwhere(labels == lab), label=int(lab))


def _shape_samples(images, visible, se) -> list[tuple[str, int, Blob]]:
    """Shape samples for every level from each contamination's first visible level to the top of its
    kind's band, tagged with the first visible level (which sets the band)."""
    top = {}
    for _, c, k in visible:
        top[c.kind] = max(top.get(c.kind, k), k)
    cache: dict = {}
    out = []
    for i, c, k in visible:
        for kk in range(k, top[c.kind] + 1):
            blob = _sample_blob(images[i], c.row, c.col, kk, se, cache)
            if blob is not None:
                out.append((c.kind, k, blob))
    return out


def fit_shape_profiles(samples: Sequence[tuple[str, int, Blob]], mode: str, z: float = 2.0) -> tuple[ShapeProfile, ...]:
    """Interval estimation (mean +/- ``z`` sd) from ``(kind, first_index, blob)`` samples."""

    def make(group, kind, k_min, k_max):
        return ShapeProfile(
            area=ShapeInterval.from_samples([b.area for _, _, b in group], floor=1.0, z=z),
            ratio=ShapeInterval.from_samples([b.aspect_ratio for _, _, b in group], floor=1.0, z=z),
            solidity=ShapeInterval.from_samples([b.solidity for _, _, b in group], floor=0.0, ceil=1.0, z=z),
            k_min=k_min,
            k_max=k_max,
            kind=kind,
        )

    ks = [k for _, k, _ in samples]
    if mode == "global":
        return (make(samples, None, min(ks), max(ks)),)
    if mode == "kind":
        out = []
        for kind in sorted({s[0] for s in samples}):
            group = [s for s in samples if s[0] == kind]
            if len(group) < 2:
                warnings.warn(f"only one sample of kind {kind!r}; its intervals are degenerate", UncalibratableWarning)
            gk = [k for _, k, _ in group]
            out.append(make(group, kind, min(gk), max(gk)))
        return tuple(out)
    raise ValueError(f"unknown interval mode {mode!r}")


def match_detections(dets: Sequence[Detection], ann: GroundTruthAnnotation, radius: float) -> tuple[int, int]:
    """(annotated contaminations found, detections matching no annotation)."""
    if not ann.contaminations:
        return 0, len(dets)
    truth = np.array([(c.row, c.col) for c in ann.contaminations])
    if not dets:
        return 0, 0
    cents = np.array([d.centroid for d in dets])
    dist = np.linalg.norm(cents[:, None, :] - truth[None, :, :], axis=2)
    close = dist <= radius
    return int(close.any(axis=0).sum()), int((~close.any(axis=1)).sum())


@dataclass
class CalibrationReport:
    profile: CalibrationProfile
    recall: float
    false_positives: int
    n_contaminations: int
    excluded: list[tuple[str, Contamination]]
    grid: list[dict]
    interval_sigma: float = 2.0

    @property
    def grid_size(self) -> int:
        return len(self.grid)


def calibrate(annotated: Sequence[tuple[np.ndarray, GroundTruthAnnotation]],
              config: CalibrationConfig | None = None) -> CalibrationReport:
    """Fit a :class:`CalibrationProfile` to annotated images.

    Thresholds and shape intervals come from the annotated objects themselves;
    the structuring element, ``d0``, growth bounds, interval mode and interval
    width are picked by exhaustive grid search, ranking by recall, then by
    false positives, then by the narrowest intervals.
    """
    config = config or CalibrationConfig()
    images = [check_gray_image(img) for img, _ in annotated]
    anns = [a for _, a in annotated]
    if not images:
        raise ValueError("calibration set is empty")

    visible = []  # (image index, contamination, first index)
    excluded = []
    for i, (img, ann) in enumerate(zip(images, anns)):
        ann.validate(img.shape)
        for c in ann.contaminations:
            k = first_visible_index(int(img[int(round(c.row)), int(round(c.col))]))
            if k > MAX_INDEX - 1:
                excluded.append((ann.image, c))
            else:
                visible.append((i, c, k))
    if excluded:
        kinds = sorted({c.kind for _, c in excluded})
        warnings.warn(
            f"{len(excluded)} contaminations (kinds {kinds}) are too light for any usable threshold; excluded",
            UncalibratableWarning,
        )
    if not visible:
        raise ValueError("no segmentable contaminations in the calibration set")
    k_l = min(k for _, _, k in visible)
    k_u = max(k for _, _, k in visible) + 1
    ladder = ThresholdLadder(k_l, k_u)
    n_truth = len(visible)
    logger.info("calibration ladder [%d, %d) from %d contaminations", k_l, k_u, n_truth)

    d0_min = min(config.d0_grid)
    best = None
    grid = []
    combos = list(itertools.product(config.interval_modes, config.interval_sigmas))
    for se in config.structuring_elements:
        samples = _shape_samples(images, visible, se)
        shape_sets = [fit_shape_profiles(samples, mode, z) for mode, z in combos]
        # Per combo, image and level: candidates with density score and growth ratios.
        # Each level is labeled once and shared by every interval setting.
        staged = [[] for _ in combos]
        for img in images:
            per_combo = [[] for _ in combos]
            for k in ladder.indices:
                actives = [[s for s in shapes if s.covers(k)] for shapes in shape_sets]
                level = _LabeledLevel(img, k, se) if any(actives) else None
                growth = {}
                for ci, active in enumerate(actives):
                    rows = []
                    if level is not None and active:
                        cands = level.candidates(active)
                        scores = level.density([b for b, _ in cands])
                        for (b, kind), s in zip(cands, scores):
                            if s >= d0_min:
                                if b.label not in growth:
                                    growth[b.label] = growth_ratios(img, b, k, se, config.neighborhood_size)
                                rows.append((b, kind, s, *growth[b.label]))
                    per_combo[ci].append((k, rows))
            for ci in range(len(combos)):
                staged[ci].append(per_combo[ci])

        for (mode, z), shapes, per_image in zip(combos, shape_sets, staged):
            for d0, ag, xg in itertools.product(config.d0_grid, config.area_growth_grid, config.axis_growth_grid):
                found = fp = 0
                for per_level, ann in zip(per_image, anns):
                    dets = [
                        Detection(b.centroid, k, b, kind)
                        for k, rows in per_level
                        for b, kind, s, ga, gm in rows
                        if s >= d0 and ga <= ag and gm <= xg
                    ]
                    dets = merge_detections(dets, config.merge_radius)
                    f, p = match_detections(dets, ann, config.match_radius)
                    found += f
                    fp += p
                grid.append({"se": se.to_dict(), "mode": mode, "z": z, "d0": d0, "area_growth_max": ag,
                             "axis_growth_max": xg, "found": found, "false_positives": fp})
                # Recall first, then fewer false positives, narrower intervals, then the loosest setting.
                key = (found, -fp, -z, -d0, ag, xg)
                if best is None or key > best[0]:
                    profile = CalibrationProfile(
                        ladder=ladder, shapes=shapes, se=se, d0=d0,
                        area_growth_max=ag, axis_growth_max=xg,
                        neighborhood_size=config.neighborhood_size,
                        merge_radius=config.merge_radius,
                    )
                    best = (key, profile)
    (found, neg_fp, neg_z, *_), profile = best
    return CalibrationReport(
        profile=profile,
        recall=found / n_truth,
        false_positives=-neg_fp,
        n_contaminations=n_truth,
        excluded=excluded,
        grid=grid,
        interval_sigma=-neg_z,
    )


class MTFilter(BaseEstimator):
    """Estimator wrapper: ``fit`` calibrates on annotated images, ``predict`` detects.

    Parameters mirror :class:`CalibrationConfig`; ``profile`` may be given to
    skip calibration entirely.
    """

    def __init__(self, structuring_elements=None, d0_grid=None, area_growth_grid=None,
                 axis_growth_grid=None, interval_modes=None, interval_sigmas=None, neighborhood_size=120,
                 merge_radius=10.0, match_radius=6.0, profile=None):
        self.structuring_elements = structuring_elements
        self.d0_grid = d0_grid
        self.area_growth_grid = area_growth_grid
        self.axis_growth_grid = axis_growth_grid
        self.interval_modes = interval_modes
        self.interval_sigmas = interval_sigmas
        self.neighborhood_size = neighborhood_size
        self.merge_radius = merge_radius
        self.match_radius = match_radius
        self.profile = profile

    def _config(self) -> CalibrationConfig:
        base = CalibrationConfig()
        overrides = {
            name: tuple(getattr(self, name))
            for name in ("structuring_elements", "d0_grid", "area_growth_grid", "axis_growth_grid", "interval_modes",
                         "interval_sigmas")
            if getattr(self, name) is not None
        }
        return replace(base, neighborhood_size=self.neighborhood_size, merge_radius=self.merge_radius,
                       match_radius=self.match_radius, **overrides)

    def fit(self, X, y):
        """``X``: gray images; ``y``: matching :class:`GroundTruthAnnotation` objects."""
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} annotations")
        report = calibrate(list(zip(X, y)), self._config())
        self.profile_ = report.profile
        self.calibration_report_ = report
        return self

    def _profile(self) -> CalibrationProfile:
        if self.profile is not None and getattr(self, "profile_", None) is None:
            return self.profile
        check_is_fitted(self, "profile_")
        return self.profile_

    def predict(self, X) -> list[list[Detection]]:
        profile = self._profile()
        return [detect(img, profile) for img in X]

    def detect(self, img) -> list[Detection]:
        return detect(img, self._profile())
