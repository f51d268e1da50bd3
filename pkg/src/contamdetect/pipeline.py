"""Filter -> crop -> classify orchestration, batch evaluation and annotated output."""

from __future__ import annotations

import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from PIL import Image

from . import imaging
from ._validation import check_gray_image
from .cnn.model import CnnModel
from .cnn.training import predict_batch
from .evaluation import ConfusionMatrix, fn_rate, fp_rate
from .mtfilter import CalibrationProfile, Detection, GroundTruthAnnotation, Verdict, detect

log = logging.getLogger(__name__)

DEFAULT_BUDGET_S = 5.0
ASPIRATIONAL_BUDGET_S = 4.0


class BudgetExceededWarning(RuntimeWarning):
    pass


@dataclass
class PipelineConfig:
    profile_path: str | None = None
    model_path: str | None = None
    crop_size: int = 120
    threshold: float = 0.5
    budget_s: float = DEFAULT_BUDGET_S
    report_path: str | None = None
    match_radius: float = 6.0

    def __post_init__(self):
        if not self.budget_s > 0:
            raise ValueError("budget_s must be > 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")

    def load(self) -> tuple[CalibrationProfile, CnnModel]:
        if not self.profile_path or not self.model_path:
            raise ValueError("config needs both profile_path and model_path")
        return CalibrationProfile.load(self.profile_path), CnnModel.load(self.model_path)


@dataclass
class ImageReport:
    image: str
    detections: list[Detection]
    duration_s: float
    shape: tuple[int, int]
    timings: dict[str, float] = field(default_factory=dict)
    budget_s: float = DEFAULT_BUDGET_S

    @property
    def n_true(self) -> int:
        return sum(d.verdict is Verdict.TRUE_CONTAMINATION for d in self.detections)

    @property
    def n_false_alarms(self) -> int:
        return sum(d.verdict is Verdict.FALSE_ALARM for d in self.detections)

    @property
    def positive(self) -> bool:
        """Image verdict: any detection survived classification."""
        return self.n_true > 0

    @property
    def over_budget(self) -> bool:
        return self.duration_s > self.budget_s

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "image": self.image,
            "shape": list(self.shape),
            "contaminated": self.positive,
            "counts": {"candidates": len(self.detections), "true_contamination": self.n_true,
                       "false_alarm": self.n_false_alarms},
            "detections": [det.to_dict() for det in self.detections],
        }
        if timing:
            d["duration_s"] = self.duration_s
            d["timings"] = dict(self.timings)
            d["budget_s"] = self.budget_s
            d["over_budget"] = self.over_budget
        return d


def classify_detections(img, detections: Sequence[Detection], model: CnnModel, crop_size: int = 120,
                        threshold: float = 0.5) -> list[Detection]:
    """Crop each candidate and give it a terminal verdict and probability."""
    if not detections:
        return []
    crops = np.stack([imaging.crop(img, d.centroid, crop_size) for d in detections])
    probs = predict_batch(model, crops)
    return [
        d.resolve(Verdict.TRUE_CONTAMINATION if p >= threshold else Verdict.FALSE_ALARM, float(p))
        for d, p in zip(detections, probs)
    ]


def run_pipeline(img, profile: CalibrationProfile, model: CnnModel, config: PipelineConfig | None = None,
                 image_id: str = "") -> ImageReport:
    config = config or PipelineConfig()
    t0 = time.perf_counter()
    img = check_gray_image(img)
    cands = detect(img, profile)
    t1 = time.perf_counter()
    dets = classify_detections(img, cands, model, config.crop_size, config.threshold)
    t2 = time.perf_counter()
    report = ImageReport(image_id, dets, t2 - t0, img.shape, {"detect_s": t1 - t0, "classify_s": t2 - t1},
                         config.budget_s)
    if report.over_budget:
        warnings.warn(f"{image_id or 'image'}: {report.duration_s:.2f} s exceeds the {config.budget_s:g} s budget",
                      BudgetExceededWarning, stacklevel=2)
    return report


def run_batch(items: Iterable[tuple[str, object]], profile: CalibrationProfile, model: CnnModel,
              config: PipelineConfig | None = None, threads: int = 1) -> list[ImageReport]:
    """Run the pipeline over (image_id, image or path) pairs; reports come back in input order."""

    def one(item):
        image_id, src = item
        img = imaging.read_image(src) if isinstance(src, (str, Path)) else src
        return run_pipeline(img, profile, model, config, image_id=str(image_id))

    items = list(items)
    if threads <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, items))


def _object_hits(dets: Sequence[Detection], ann: GroundTruthAnnotation, radius: float) -> int:
    if not ann.contaminations or not dets:
        return 0
    pos = np.array([d.centroid for d in dets], dtype=np.float64)
    return sum(bool((np.hypot(pos[:, 0] - c.row, pos[:, 1] - c.col) <= radius).any()) for c in ann.contaminations)


@dataclass
class PipelineEvaluation:
    cm: ConfusionMatrix
    filter_cm: ConfusionMatrix
    object_recall: float
    filter_object_recall: float
    n_contaminations: int
    durations: list[float]

    @property
    def fp_rate(self) -> float:
        return float(fp_rate(self.cm))

    @property
    def fn_rate(self) -> float:
        return float(fn_rate(self.cm))

    @property
    def filter_fp_rate(self) -> float:
        return float(fp_rate(self.filter_cm))

    @property
    def filter_fn_rate(self) -> float:
        return float(fn_rate(self.filter_cm))

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "pipeline": {"cm": self.cm.to_dict(), "fp_rate": self.fp_rate, "fn_rate": self.fn_rate,
                         "object_recall": self.object_recall},
            "filter": {"cm": self.filter_cm.to_dict(), "fp_rate": self.filter_fp_rate, "fn_rate": self.filter_fn_rate,
                       "object_recall": self.filter_object_recall},
            "n_images": len(self.durations),
            "n_contaminations": self.n_contaminations,
        }
        if timing and self.durations:
            d["duration_s"] = {"mean": float(np.mean(self.durations)), "max": float(np.max(self.durations))}
        return d


def evaluate_pipeline(reports: Sequence[ImageReport], annotations: Sequence[GroundTruthAnnotation],
                      match_radius: float = 6.0) -> PipelineEvaluation:
    """Image-level accounting for the full pipeline and for the filter alone (any candidate = positive)."""
    if not reports:
        raise ValueError("no reports to evaluate")
    if len(reports) != len(annotations):
        raise ValueError("reports and annotations differ in length")
    truth = [bool(a.contaminations) for a in annotations]
    cm = ConfusionMatrix.from_labels(truth, [r.positive for r in reports])
    filter_cm = ConfusionMatrix.from_labels(truth, [bool(r.detections) for r in reports])
    n_obj = sum(len(a.contaminations) for a in annotations)
    hits = sum(_object_hits([d for d in r.detections if d.verdict is Verdict.TRUE_CONTAMINATION], a, match_radius)
               for r, a in zip(reports, annotations))
    filter_hits = sum(_object_hits(r.detections, a, match_radius) for r, a in zip(reports, annotations))
    return PipelineEvaluation(cm, filter_cm, hits / n_obj if n_obj else 0.0, filter_hits / n_obj if n_obj else 0.0,
                              n_obj, [r.duration_s for r in reports])


# files

COLORS = {Verdict.TRUE_CONTAMINATION: (255, 0, 0), Verdict.FALSE_ALARM: (0, 160, 255), Verdict.CANDIDATE: (255, 200, 0)}


def annotate(img, detections: Sequence[Detection], radius: int = 20) -> np.ndarray:
    """RGB copy of ``img`` with a circle around each detection (red TC, blue false alarm, yellow unclassified)."""
    rgb = cv2.cvtColor(check_gray_image(img), cv2.COLOR_GRAY2RGB)
    for d in detections:
        center = (int(round(d.centroid[1])), int(round(d.centroid[0])))
        cv2.circle(rgb, center, radius, COLORS[d.verdict], 2, lineType=cv2.LINE_AA)
    return rgb


def write_annotated(path, img, detections) -> None:
    Image.fromarray(annotate(img, detections), mode="RGB").save(path, format="PNG")


def load_annotated_dir(directory) -> list[tuple[Path, GroundTruthAnnotation]]:
    """(image path, annotation) for every annotation JSON in ``directory``, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    out = []
    for js in sorted(directory.glob("*.json")):
        data = json.loads(js.read_text())
        if "contaminations" not in data:
            continue
        ann = GroundTruthAnnotation.from_dict(data)
        out.append((directory / ann.image, ann))
    if not out:
        raise FileNotFoundError(f"no annotation files in {directory}")
    return out
