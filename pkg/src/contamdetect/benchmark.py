"""Seeded synthetic end-to-end benchmark: calibrate, build crops, train, then score filter and pipeline.

Everything is derived from one :class:`BenchmarkSpec` (``data/benchmark.json``
ships with the package), so a run is reproducible from the spec file alone.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .cnn.model import Hyperparams
from .cnn.training import train
from .evaluation import ConfusionMatrix
from .mtfilter import CalibrationConfig, calibrate
from .pipeline import PipelineConfig, PipelineEvaluation, evaluate_pipeline, run_pipeline
from .synth import ContaminantSpec, SceneSpec, derive_seed, generate_crop_dataset, generate_scene

log = logging.getLogger(__name__)

# stage indices for derive_seed
_CALIBRATION, _CROPS, _TEST = 0, 1, 2


@dataclass
class BenchmarkSpec:
    seed: int
    calibration_images: int
    calibration_scene: SceneSpec
    crops: tuple[int, int]  # (n_tc, n_fc)
    crop_scene: SceneSpec
    hyperparams: Hyperparams
    test_clean: int
    test_contaminated: int
    test_scene: SceneSpec  # contaminant list ignored; one contaminant per contaminated image
    test_kinds: tuple[str, ...]
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    budget_s: float = 5.0

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        d = dict(d)
        for key in ("calibration_scene", "crop_scene", "test_scene"):
            d[key] = SceneSpec.from_dict(d[key])
        d["hyperparams"] = Hyperparams.from_dict(d["hyperparams"])
        d["calibration"] = CalibrationConfig.from_dict(d.get("calibration", {}))
        d["crops"] = tuple(d["crops"])
        d["test_kinds"] = tuple(d["test_kinds"])
        return cls(**d)

    @classmethod
    def load(cls, path=None) -> "BenchmarkSpec":
        """Load ``path``, or the committed default spec when ``path`` is None."""
        if path is None:
            text = resources.files("contamdetect").joinpath("data/benchmark.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def test_items(self):
        """(seed, SceneSpec) per test image; contaminated images first, kinds cycling."""
        n = self.test_clean + self.test_contaminated
        for i in range(n):
            spec = SceneSpec.from_dict(self.test_scene.to_dict())
            if i < self.test_contaminated:
                spec.contaminants = [ContaminantSpec.default(self.test_kinds[i % len(self.test_kinds)], 1)]
            else:
                spec.contaminants = []
            yield derive_seed(derive_seed(self.seed, _TEST), i), spec


@dataclass
class BenchmarkResult:
    evaluation: PipelineEvaluation
    calibration_recall: float
    calibration_false_positives: int
    loss_trace: list[float]
    stage_seconds: dict[str, float]
    profile: object = field(default=None, repr=False)
    model: object = field(default=None, repr=False)
    reports: list = field(default_factory=list, repr=False)
    annotations: list = field(default_factory=list, repr=False)

    @property
    def filter_cm(self) -> ConfusionMatrix:
        return self.evaluation.filter_cm

    @property
    def pipeline_cm(self) -> ConfusionMatrix:
        return self.evaluation.cm

    def to_dict(self, timing: bool = True) -> dict:
        d = {"evaluation": self.evaluation.to_dict(timing), "calibration_recall": self.calibration_recall,
             "calibration_false_positives": self.calibration_false_positives, "loss_trace": self.loss_trace}
        if timing:
            d["stage_seconds"] = self.stage_seconds
        return d


def run_benchmark(spec: BenchmarkSpec, progress=None) -> BenchmarkResult:
    say = progress or (lambda msg: log.info("%s", msg))
    stages = {}

    t = time.perf_counter()
    cal_seed = derive_seed(spec.seed, _CALIBRATION)
    cal = [generate_scene(spec.calibration_scene, seed=derive_seed(cal_seed, i))[:2] for i in range(spec.calibration_images)]
    rep = calibrate(cal, spec.calibration)
    profile = rep.profile
    stages["calibrate"] = time.perf_counter() - t
    say(f"calibrated on {len(cal)} images: recall {rep.recall:.3f}, {rep.false_positives} FP ({stages['calibrate']:.0f} s)")

    t = time.perf_counter()
    n_tc, n_fc = spec.crops
    crops, labels, _ = generate_crop_dataset(n_tc, n_fc, spec.crop_scene, derive_seed(spec.seed, _CROPS), profile=profile)
    stages["crops"] = time.perf_counter() - t

    t = time.perf_counter()
    res = train(np.stack(crops), np.asarray(labels), spec.hyperparams)
    stages["train"] = time.perf_counter() - t
    say(f"trained on {len(crops)} crops, final loss {res.loss_trace[-1]:.4f} ({stages['train']:.0f} s)")

    t = time.perf_counter()
    cfg = PipelineConfig(budget_s=spec.budget_s)
    reports, anns = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, (seed, scene) in enumerate(spec.test_items()):
            img, ann, _ = generate_scene(scene, seed=seed)
            reports.append(run_pipeline(img, profile, res.model, cfg, image_id=f"test_{i:04d}"))
            anns.append(ann)
    stages["test"] = time.perf_counter() - t
    ev = evaluate_pipeline(reports, anns, spec.calibration.match_radius)
    say(f"tested {len(reports)} images ({stages['test']:.0f} s)")
    return BenchmarkResult(ev, rep.recall, rep.false_positives, res.loss_trace, stages, profile, res.model, reports, anns)
