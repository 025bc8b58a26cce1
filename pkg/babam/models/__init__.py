"""Classifier construction, training and checkpoints."""

from .spec import AugmentPolicy, FreezeMode, HYPERPARAM_PROFILES, LossKind, ModelSpec, TrainHyperParams
from .classifier import TrainedModel, build_classifier, feature_extract, predict, predict_labels
from .training import accuracy, train
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "AugmentPolicy",
    "FreezeMode",
    "HYPERPARAM_PROFILES",
    "LossKind",
    "ModelSpec",
    "TrainHyperParams",
    "TrainedModel",
    "build_classifier",
    "feature_extract",
    "predict",
    "predict_labels",
    "accuracy",
    "train",
    "load_checkpoint",
    "save_checkpoint",
]
