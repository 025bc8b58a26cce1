from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..attacks.patch import place_patch
from ..core.dataset import Dataset
from ..core.errors import DataError, ModelError
from ..core.types import ImageSample, TriggerPatch
from ..models.classifier import TrainedModel, predict
from ..utils import derive_seed

logger = logging.getLogger(__name__)

Images = Union[Dataset, Sequence[ImageSample]]


def _samples(images: Images) -> List[ImageSample]:
    return list(images.samples) if isinstance(images, Dataset) else list(images)


def build_patched_test_set(source_images: Images, patch: TriggerPatch, seed: int,
                           training_ids: Optional[Iterable[str]] = None) -> Dataset:
    """Patch every attacker image at an independently drawn position (deterministic per seed)."""
    samples = _samples(source_images)
    if not samples:
        raise DataError("no attacker images to patch")
    if training_ids is not None:
        overlap = {s.sample_id for s in samples} & set(training_ids)
        if overlap:
            raise DataError(f"{len(overlap)} attacker test images also appear in the training set, "
                            f"e.g. {sorted(overlap)[0]}")
    rng = np.random.default_rng(seed)
    patched = []
    for s in samples:
        pixels, position = place_patch(s, patch, rng)
        patched.append(ImageSample(sample_id=f"patched/{s.sample_id}", pixels=pixels, label=s.label))
        logger.debug(f"patched/{s.sample_id} at {position}")
    classes = sorted({s.label for s in samples})
    return Dataset.from_samples(patched, classes=classes, name="patched")


def _target_index(model: TrainedModel, target_class: str) -> int:
    if target_class not in model.class_index:
        raise ModelError(f"target class {target_class!r} not among model classes {model.classes}")
    return model.class_index[target_class]


def success_rate(model: TrainedModel, images: Images, target_class: str) -> float:
    """Fraction of images the model assigns to `target_class`."""
    samples = _samples(images)
    if not samples:
        raise DataError("cannot compute a success rate on an empty set")
    idx = _target_index(model, target_class)
    probs = predict(model, samples)
    hits = int((probs.argmax(dim=1) == idx).sum().item())
    return hits / len(samples)


def attack_confidence(model: TrainedModel, images: Images, target_class: str) -> float:
    """Mean probability of the target class on the given (patched) images."""
    samples = _samples(images)
    if not samples:
        raise DataError("cannot compute attack confidence on an empty set")
    probs = predict(model, samples)
    return float(probs[:, _target_index(model, target_class)].mean().item())


@dataclass
class AsrResult:
    mean: float
    std: float
    per_trial: List[float]
    confidence: float

    @property
    def trials(self) -> int:
        return len(self.per_trial)


def attack_success_rate(model: TrainedModel, attacker_images: Images, target_class: str, trials: int = 5,
                        seed: int = 0, patch: Optional[TriggerPatch] = None) -> AsrResult:
    """ASR mean and population std over `trials`.

    With a patch, each trial re-patches the clean attacker images at freshly
    drawn positions; without one, the images are taken as already patched.
    """
    if trials < 1:
        raise DataError("trials must be >= 1")
    samples = _samples(attacker_images)
    if not samples:
        raise DataError("cannot compute ASR on an empty set")
    rates, confs = [], []
    for t in range(trials):
        queries = samples if patch is None else build_patched_test_set(samples, patch, derive_seed(seed, "trial", t))
        rates.append(success_rate(model, queries, target_class))
        confs.append(attack_confidence(model, queries, target_class))
    result = AsrResult(mean=float(np.mean(rates)), std=float(np.std(rates)), per_trial=rates,
                       confidence=float(np.mean(confs)))
    logger.info(f"ASR {result.mean:.4f} +/- {result.std:.4f} over {trials} trial(s)")
    return result


def natural_misclassification_baseline(clean_model: TrainedModel, source_images: Images,
                                       target_class: str) -> float:
    """Fraction of unpatched attacker images the clean model already calls the target."""
    return success_rate(clean_model, source_images, target_class)


def clean_accuracy(model: TrainedModel, test_set: Dataset) -> Tuple[float, Dict[str, float]]:
    """Overall and per-class accuracy on a clean test set."""
    if len(test_set) == 0:
        raise DataError("clean test set is empty")
    unknown = sorted({s.label for s in test_set} - set(model.class_index))
    if unknown:
        raise ModelError(f"test labels {unknown} unknown to the model")
    probs = predict(model, list(test_set.samples))
    pred = probs.argmax(dim=1)
    truth = torch.tensor([model.class_index[s.label] for s in test_set])
    correct = (pred == truth)
    per_class: Dict[str, float] = {}
    for label in sorted({s.label for s in test_set}):
        mask = truth == model.class_index[label]
        per_class[label] = float(correct[mask].float().mean().item())
    return float(correct.float().mean().item()), per_class


@dataclass
class EvalReport:
    label: str
    asr: float
    asr_std: float
    clean_accuracy: float
    per_class_accuracy: Dict[str, float] = field(default_factory=dict)
    trials: int = 1
    asr_per_trial: List[float] = field(default_factory=list)
    attack_confidence: Optional[float] = None
    natural_misclassification: Optional[float] = None
    config_snapshot: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("asr", "clean_accuracy"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0) and not math.isnan(value):
                raise DataError(f"{name}={value} outside [0, 1]")
        if self.asr_std < 0:
            raise DataError("asr_std must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "asr": self.asr,
            "asr_std": self.asr_std,
            "asr_per_trial": list(self.asr_per_trial),
            "trials": self.trials,
            "clean_accuracy": self.clean_accuracy,
            "per_class_accuracy": dict(self.per_class_accuracy),
            "attack_confidence": self.attack_confidence,
            "natural_misclassification": self.natural_misclassification,
            "config": self.config_snapshot,
            "extra": self.extra,
        }

    def row(self) -> Dict[str, Any]:
        """Flat view for tables."""
        return {
            "label": self.label,
            "clean_accuracy": self.clean_accuracy,
            "asr": self.asr,
            "asr_std": self.asr_std,
            "attack_confidence": self.attack_confidence,
            "natural_misclassification": self.natural_misclassification,
            "trials": self.trials,
        }


def evaluate_model(model: TrainedModel, test_set: Dataset, attacker_images: Images, patch: TriggerPatch,
                   target_class: str, trials: int = 5, seed: int = 0, label: str = "model",
                   config_snapshot: Optional[Dict[str, Any]] = None,
                   baseline_model: Optional[TrainedModel] = None) -> EvalReport:
    """Clean accuracy plus patched-query ASR; test-time queries are never perturbed by the defense."""
    acc, per_class = clean_accuracy(model, test_set)
    asr = attack_success_rate(model, attacker_images, target_class, trials=trials, seed=seed, patch=patch)
    natural = None
    if baseline_model is not None:
        natural = natural_misclassification_baseline(baseline_model, attacker_images, target_class)
    report = EvalReport(
        label=label,
        asr=asr.mean,
        asr_std=asr.std,
        clean_accuracy=acc,
        per_class_accuracy=per_class,
        trials=trials,
        asr_per_trial=asr.per_trial,
        attack_confidence=asr.confidence,
        natural_misclassification=natural,
        config_snapshot=dict(config_snapshot or {}),
    )
    logger.info(f"[{label}] accuracy={acc:.4f} ASR={asr.mean:.4f}+/-{asr.std:.4f}")
    return report
