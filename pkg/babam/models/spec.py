from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional, Tuple

from ..core.errors import ModelError


class FreezeMode(str, Enum):
    FROZEN = "frozen"  # whole backbone frozen, head trains
    UNFROZEN = "unfrozen"
    FREEZE_FIRST_K = "freeze_first_k"


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    BINARY_CROSS_ENTROPY = "binary_cross_entropy"


@dataclass(frozen=True)
class TrainHyperParams:
    epochs: int = 15
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    optimizer: str = "sgd"  # sgd | adam

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ModelError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ModelError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ModelError(f"unknown optimizer {self.optimizer!r}")


# Named hyper-parameter profiles: desk scale, and the full-scale reference values.
HYPERPARAM_PROFILES: Dict[str, TrainHyperParams] = {
    "desk": TrainHyperParams(epochs=15, learning_rate=0.01, momentum=0.9, batch_size=32),
    "full": TrainHyperParams(epochs=24, learning_rate=0.0001, momentum=0.9, batch_size=256),
}


@dataclass(frozen=True)
class AugmentPolicy:
    hflip: bool = True
    max_translate: float = 0.1  # fraction of width/height

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls(hflip=False, max_translate=0.0)

    @property
    def enabled(self) -> bool:
        return self.hflip or self.max_translate > 0


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "desk-convnet"
    num_classes: int = 2
    freeze_mode: FreezeMode = FreezeMode.UNFROZEN
    freeze_k: Optional[int] = None
    head_widths: Tuple[int, ...] = (256, 128)
    dropout: float = 0.35
    image_size: Tuple[int, int] = (64, 64)
    pretrained: bool = False
    loss: LossKind = LossKind.CROSS_ENTROPY
    hyperparams: TrainHyperParams = field(default_factory=TrainHyperParams)

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError("dropout must be in [0, 1)")
        if self.freeze_mode == FreezeMode.FREEZE_FIRST_K and (self.freeze_k is None or self.freeze_k < 0):
            raise ModelError("freeze_first_k requires a nonnegative freeze_k")
        if self.loss == LossKind.BINARY_CROSS_ENTROPY and self.num_classes != 2:
            raise ModelError("binary cross-entropy requires num_classes == 2")
        if any(w < 1 for w in self.head_widths):
            raise ModelError("head widths must be positive")

    @property
    def output_dim(self) -> int:
        return 1 if self.loss == LossKind.BINARY_CROSS_ENTROPY else self.num_classes

    def with_changes(self, **changes) -> "ModelSpec":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, object]:
        return {
            "backbone": self.backbone,
            "num_classes": self.num_classes,
            "freeze_mode": self.freeze_mode.value,
            "freeze_k": self.freeze_k,
            "head_widths": list(self.head_widths),
            "dropout": self.dropout,
            "image_size": list(self.image_size),
            "pretrained": self.pretrained,
            "loss": self.loss.value,
            "hyperparams": {
                "epochs": self.hyperparams.epochs,
                "learning_rate": self.hyperparams.learning_rate,
                "momentum": self.hyperparams.momentum,
                "batch_size": self.hyperparams.batch_size,
                "optimizer": self.hyperparams.optimizer,
            },
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelSpec":
        hp = dict(data.get("hyperparams") or {})
        return cls(
            backbone=str(data["backbone"]),
            num_classes=int(data["num_classes"]),
            freeze_mode=FreezeMode(data.get("freeze_mode", FreezeMode.UNFROZEN.value)),
            freeze_k=data.get("freeze_k"),
            head_widths=tuple(int(w) for w in data.get("head_widths", (256, 128))),
            dropout=float(data.get("dropout", 0.35)),
            image_size=tuple(int(v) for v in data.get("image_size", (64, 64))),
            pretrained=bool(data.get("pretrained", False)),
            loss=LossKind(data.get("loss", LossKind.CROSS_ENTROPY.value)),
            hyperparams=TrainHyperParams(**hp),
        )
