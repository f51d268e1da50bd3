"""Two-stage contamination detector for X-ray images of apparel.

Stage one, :mod:`contamdetect.mtfilter`, binarizes an image at a ladder of
gray thresholds and keeps blobs whose shape, isolation and stability look
like a foreign object. Stage two, :mod:`contamdetect.cnn`, classifies a
120x120 crop around each candidate as a true or false contamination.
"""

from .cnn import CNNClassifier, CnnModel, Hyperparams
from .evaluation import ConfusionMatrix, accuracy, f_beta, fn_rate, fp_rate, precision, recall
from .mtfilter import CalibrationProfile, Detection, GroundTruthAnnotation, MTFilter, calibrate, detect
from .pipeline import ImageReport, PipelineConfig, evaluate_pipeline, run_pipeline
from .synth import ContaminantSpec, SceneSpec, generate_scene

__version__ = "0.1.0"

__all__ = [
    "CNNClassifier", "CalibrationProfile", "CnnModel", "ConfusionMatrix", "ContaminantSpec", "Detection",
    "GroundTruthAnnotation", "Hyperparams", "ImageReport", "MTFilter", "PipelineConfig", "SceneSpec",
    "accuracy", "calibrate", "detect", "evaluate_pipeline", "f_beta", "fn_rate", "fp_rate", "generate_scene",
    "precision", "recall", "run_pipeline",
]
