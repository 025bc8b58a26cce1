from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from ..attacks.hidden_trigger import FeatureFn, craft_hidden_poison
from ..attacks.patch import place_patch
from ..core.dataset import Dataset, split
from ..core.errors import DataError, ModelError, TrainingError
from ..core.types import ImageSample, PoisonPlan, PoisonVerdict, TriggerPatch
from ..models.checkpoint import load_checkpoint, save_checkpoint
from ..models.classifier import TrainedModel, build_classifier, predict
from ..models.registry import backbone_depth
from ..models.spec import AugmentPolicy, FreezeMode, LossKind, ModelSpec, TrainHyperParams
from ..models.training import accuracy, train

logger = logging.getLogger(__name__)

CLEAN = "clean"
POISONED = "poisoned"
PIRM_CLASS_INDEX = {CLEAN: 0, POISONED: 1}


@dataclass(frozen=True)
class PirmSpec:
    backbone: str = "desk-convnet"
    unfrozen_tail: int = 3  # trailing backbone stages that fine-tune
    head_widths: Tuple[int, ...] = (256, 128)
    dropout: float = 0.35
    threshold: float = 0.5
    image_size: Tuple[int, int] = (64, 64)
    pretrained: bool = False
    hyperparams: TrainHyperParams = field(
        default_factory=lambda: TrainHyperParams(epochs=5, learning_rate=1e-3, batch_size=32, optimizer="adam")
    )

    def __post_init__(self) -> None:
        if self.unfrozen_tail < 1:
            raise ModelError("unfrozen_tail must be >= 1")
        if not (0.0 < self.threshold < 1.0):
            raise ModelError(f"threshold must be in (0, 1), got {self.threshold}")

    def to_model_spec(self) -> ModelSpec:
        depth = backbone_depth(self.backbone)
        k = max(0, depth - self.unfrozen_tail)
        return ModelSpec(
            backbone=self.backbone,
            num_classes=2,
            freeze_mode=FreezeMode.FREEZE_FIRST_K if k else FreezeMode.UNFROZEN,
            freeze_k=k if k else None,
            head_widths=self.head_widths,
            dropout=self.dropout,
            image_size=self.image_size,
            pretrained=self.pretrained,
            loss=LossKind.BINARY_CROSS_ENTROPY,
            hyperparams=self.hyperparams,
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "backbone": self.backbone,
            "unfrozen_tail": self.unfrozen_tail,
            "head_widths": list(self.head_widths),
            "dropout": self.dropout,
            "threshold": self.threshold,
            "image_size": list(self.image_size),
            "pretrained": self.pretrained,
        }


_FULL_HP = TrainHyperParams(epochs=3, learning_rate=1e-4, batch_size=256, optimizer="adam")

# "full-blocks" fine-tunes the last two VGG16 conv blocks (6 conv layers),
# "full-layers" only the last three conv layers.
PIRM_PROFILES: Dict[str, PirmSpec] = {
    "desk": PirmSpec(),
    "full-blocks": PirmSpec(backbone="vgg16", unfrozen_tail=6, image_size=(224, 224), pretrained=True,
                            hyperparams=_FULL_HP),
    "full-layers": PirmSpec(backbone="vgg16", unfrozen_tail=3, image_size=(224, 224), pretrained=True,
                            hyperparams=_FULL_HP),
}


@dataclass
class PirmCorpus:
    dataset: Dataset  # labels: clean / poisoned
    source_ids: List[str]
    target_ids: List[str]
    poisoned_classes: List[str]

    def overlap(self) -> set:
        return set(self.source_ids) & set(self.target_ids)


def build_pirm_corpus(base_dataset: Dataset, poison_fraction_of_classes: float, plan: PoisonPlan,
                      seed: int, feature_fn: FeatureFn, patch: TriggerPatch,
                      max_per_label: Optional[int] = None, progress: bool = False) -> PirmCorpus:
    """Balanced clean/poisoned corpus for training the poison recognizer.

    A fraction of the base classes is chosen as poisoned: their images serve as
    targets of hidden-trigger poisons. Patched sources and clean examples come
    from the remaining classes, so source and target ids never overlap. The plan
    supplies the crafting parameters; its class names are not used.
    """
    classes = base_dataset.classes
    if len(classes) < 2:
        raise DataError("PIRM corpus needs at least two classes")
    n_poisoned = int(round(poison_fraction_of_classes * len(classes)))
    if poison_fraction_of_classes <= 0 or n_poisoned == 0:
        raise DataError("no poisoned class: poison_fraction_of_classes selects zero classes")
    if n_poisoned >= len(classes):
        raise DataError("no clean class: poison_fraction_of_classes selects every class")

    rng = np.random.default_rng(seed)
    poisoned_classes = sorted(rng.choice(classes, size=n_poisoned, replace=False).tolist())
    target_pool = [s for s in base_dataset if s.label in poisoned_classes]
    clean_pool = [s for s in base_dataset if s.label not in poisoned_classes]
    n = min(len(target_pool), len(clean_pool))
    if max_per_label is not None:
        n = min(n, max_per_label)
    if n == 0:
        raise DataError("insufficient images for a balanced PIRM corpus")

    target_idx = np.sort(rng.choice(len(target_pool), size=n, replace=False))
    clean_idx = np.sort(rng.choice(len(clean_pool), size=n, replace=False))
    source_idx = rng.choice(len(clean_pool), size=n, replace=len(clean_pool) < n)

    samples: List[ImageSample] = []
    source_ids: List[str] = []
    target_ids: List[str] = []
    logger.info(f"Building PIRM corpus: {n} clean + {n} poisoned, poisoned classes={poisoned_classes}")
    for ti, si in tqdm(list(zip(target_idx.tolist(), source_idx.tolist())), desc="pirm corpus",
                       disable=not progress):
        target, source = target_pool[ti], clean_pool[si]
        patched, _ = place_patch(source, patch, rng)
        rec = craft_hidden_poison(target, patched, feature_fn, plan, source_id=source.sample_id)
        samples.append(ImageSample(
            sample_id=f"{POISONED}/{target.sample_id}",
            pixels=rec.poisoned_pixels.clamp(0.0, 1.0),
            label=POISONED,
            is_poisoned=True,
        ))
        source_ids.append(source.sample_id)
        target_ids.append(target.sample_id)
    for ci in clean_idx.tolist():
        s = clean_pool[ci]
        samples.append(ImageSample(sample_id=f"{CLEAN}/{s.sample_id}", pixels=s.pixels, label=CLEAN))

    corpus = Dataset(tuple(samples), PIRM_CLASS_INDEX, name=f"{base_dataset.name}:pirm")
    return PirmCorpus(corpus, source_ids, target_ids, poisoned_classes)


@dataclass
class TrainedPirm:
    model: TrainedModel
    spec: PirmSpec
    held_out_accuracy: float = float("nan")

    @property
    def threshold(self) -> float:
        return self.spec.threshold

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.model.spec.image_size


def train_pirm(spec: PirmSpec, corpus: Union[Dataset, PirmCorpus], seed: int,
               device: Optional[str] = None) -> TrainedPirm:
    """Fine-tune the recognizer on 70% of the corpus and report accuracy on the other 30%."""
    data = corpus.dataset if isinstance(corpus, PirmCorpus) else corpus
    counts = data.label_counts()
    if set(data.class_index) != set(PIRM_CLASS_INDEX):
        raise TrainingError(f"PIRM corpus labels must be {sorted(PIRM_CLASS_INDEX)}, got {sorted(data.class_index)}")
    if counts.get(CLEAN, 0) == 0 or counts.get(POISONED, 0) == 0:
        raise TrainingError(f"PIRM corpus must contain both labels, got {dict(counts)}")
    if dict(data.class_index) != PIRM_CLASS_INDEX:
        data = Dataset(data.samples, PIRM_CLASS_INDEX, data.name)

    train_set, _, test_set = split(data, (0.7, 0.0, 0.3), seed, poisoned_in_eval=True)
    model = build_classifier(spec.to_model_spec(), device=device, seed=seed)
    model.class_index = dict(PIRM_CLASS_INDEX)
    trained = train(model, train_set, augment=AugmentPolicy.none(), seed=seed)
    held_out = accuracy(trained, test_set)
    logger.info(f"PIRM held-out accuracy {held_out:.4f} on {len(test_set)} images")
    return TrainedPirm(model=trained, spec=spec, held_out_accuracy=held_out)


def poison_confidences(pirm: TrainedPirm, images: Union[torch.Tensor, Sequence[ImageSample]]) -> torch.Tensor:
    probs = predict(pirm.model, images)
    if probs.ndim == 1:
        probs = probs.unsqueeze(0)
    return probs[:, PIRM_CLASS_INDEX[POISONED]]


def classify_poison(pirm: TrainedPirm, image: Union[torch.Tensor, ImageSample]) -> PoisonVerdict:
    """Flag 1 when the poisoned-class probability reaches the threshold (ties flag)."""
    conf = float(poison_confidences(pirm, image)[0].item())
    return PoisonVerdict.from_confidence(conf, pirm.threshold)


def classify_poisons(pirm: TrainedPirm, images: Sequence[ImageSample]) -> List[PoisonVerdict]:
    if len(images) == 0:
        return []
    confs = poison_confidences(pirm, images).tolist()
    return [PoisonVerdict.from_confidence(float(c), pirm.threshold) for c in confs]


def with_threshold(pirm: TrainedPirm, threshold: float) -> TrainedPirm:
    return replace(pirm, spec=replace(pirm.spec, threshold=threshold))


def save_pirm(pirm: TrainedPirm, directory: str | os.PathLike) -> None:
    save_checkpoint(pirm.model, directory, extra={
        "kind": "pirm",
        "pirm_spec": pirm.spec.to_dict(),
        "threshold": pirm.threshold,
        "held_out_accuracy": pirm.held_out_accuracy,
    })


def load_pirm(directory: str | os.PathLike, device: Optional[str] = None) -> TrainedPirm:
    model, extra = load_checkpoint(directory, device=device)
    if extra.get("kind") != "pirm":
        raise ModelError(f"{directory} is not a PIRM checkpoint")
    raw = dict(extra.get("pirm_spec", {}))
    spec = PirmSpec(
        backbone=str(raw.get("backbone", model.spec.backbone)),
        unfrozen_tail=int(raw.get("unfrozen_tail", 3)),
        head_widths=tuple(int(w) for w in raw.get("head_widths", model.spec.head_widths)),
        dropout=float(raw.get("dropout", model.spec.dropout)),
        threshold=float(extra.get("threshold", 0.5)),
        image_size=model.spec.image_size,
        pretrained=bool(raw.get("pretrained", False)),
        hyperparams=model.spec.hyperparams,
    )
    return TrainedPirm(model=model, spec=spec,
                       held_out_accuracy=float(extra.get("held_out_accuracy", float("nan"))))
