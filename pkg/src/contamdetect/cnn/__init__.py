"""From-scratch numpy CNN classifying 120x120 crops as true (TC) or false (FC) contamination."""

from .dataset import read_crop_dataset, write_crop_dataset
from .layers import Conv2D, Dense, Dropout, MaxPool, ReLU, ShapeError, Sigmoid, layer_from_spec
from .model import AugmentRanges, CnnModel, Hyperparams, default_architecture, light_architecture
from .training import (
    CNNClassifier,
    OptimizerState,
    TrainingDivergedError,
    TrainResult,
    adam_step,
    affine_warp,
    augment,
    normalize,
    predict,
    predict_batch,
    train,
    weighted_bce,
)

__all__ = [
    "AugmentRanges", "CNNClassifier", "CnnModel", "Conv2D", "Dense", "Dropout", "Hyperparams", "MaxPool",
    "OptimizerState", "ReLU", "ShapeError", "Sigmoid", "TrainResult", "TrainingDivergedError", "adam_step",
    "affine_warp", "augment", "default_architecture", "layer_from_spec", "light_architecture", "normalize",
    "predict", "predict_batch", "read_crop_dataset", "train", "weighted_bce", "write_crop_dataset",
]
