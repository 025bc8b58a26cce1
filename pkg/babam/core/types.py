from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import torch

from .errors import CraftError, DataError


class ScenarioMode(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"


class AnchorPolicy(str, Enum):
    FIXED = "fixed"
    RANDOM = "random"


@dataclass(frozen=True, eq=False)
class ImageSample:
    sample_id: str  # path relative to the dataset root, e.g. "alice/001.png"
    pixels: torch.Tensor  # (3, H, W) float32 in [0, 1]
    label: str
    is_poisoned: bool = False  # ground truth, never read by the defense
    source_path: Optional[str] = None  # original file, if loaded from disk

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DataError(f"{self.sample_id}: expected (3, H, W) pixels, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[1] == 0 or self.pixels.shape[2] == 0:
            raise DataError(f"{self.sample_id}: empty image")
        if self.pixels.numel() and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError(f"{self.sample_id}: pixel values outside [0, 1]")

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.pixels.shape[1]), int(self.pixels.shape[2])

    def replace(self, **changes) -> "ImageSample":
        values = {
            "sample_id": self.sample_id,
            "pixels": self.pixels,
            "label": self.label,
            "is_poisoned": self.is_poisoned,
            "source_path": self.source_path,
        }
        values.update(changes)
        return ImageSample(**values)


@dataclass(frozen=True)
class ScenarioSpec:
    mode: ScenarioMode
    source_class: str  # attacker identity
    target_class: str  # victim identity
    positive_class: Optional[str] = None  # binary mode
    negative_classes: Tuple[str, ...] = ()  # binary mode
    class_list: Tuple[str, ...] = ()  # multiclass mode

    def __post_init__(self) -> None:
        if self.source_class == self.target_class:
            raise DataError("source_class and target_class must differ")
        if self.mode == ScenarioMode.BINARY:
            if self.positive_class is None:
                object.__setattr__(self, "positive_class", self.target_class)
            if self.positive_class != self.target_class:
                raise DataError("binary scenario: positive_class must equal target_class")
            if not self.negative_classes:
                raise DataError("binary scenario: negative_classes is empty")
        elif not self.class_list:
            raise DataError("multiclass scenario: class_list is empty")

    def named_classes(self) -> List[str]:
        if self.mode == ScenarioMode.BINARY:
            return [self.target_class, self.source_class, *self.negative_classes]
        return [self.source_class, self.target_class, *self.class_list]


@dataclass(frozen=True, eq=False)
class TriggerPatch:
    pixels: torch.Tensor  # (3, p_h, p_w) in [0, 1]
    anchor: AnchorPolicy = AnchorPolicy.RANDOM
    position: Optional[Tuple[int, int]] = None  # used when anchor is FIXED

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise CraftError(f"patch must be (3, p_h, p_w), got {tuple(self.pixels.shape)}")
        if self.pixels.numel() and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise CraftError("patch pixel values outside [0, 1]")
        if self.anchor == AnchorPolicy.FIXED and self.position is None:
            raise CraftError("fixed patch anchor requires a position")

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.pixels.shape[1]), int(self.pixels.shape[2])

    @classmethod
    def random(cls, size: int = 8, seed: int = 0, anchor: AnchorPolicy = AnchorPolicy.RANDOM,
               position: Optional[Tuple[int, int]] = None) -> "TriggerPatch":
        """Random-valued square block on the 1/255 grid, so it survives an 8-bit PNG round trip."""
        gen = torch.Generator().manual_seed(seed)
        levels = torch.randint(0, 256, (3, size, size), generator=gen)
        return cls(pixels=levels.float() / 255.0, anchor=anchor, position=position)


@dataclass(frozen=True)
class PoisonPlan:
    source_class: str
    target_class: str
    fraction: float = 0.8
    iterations: int = 200
    step_size: float = 0.01
    delta: float = 16.0 / 255.0  # L-inf radius around the target image
    feature_layer: str = "features"
    max_fraction: float = 0.8
    max_backtracks: int = 10
    normalize_step: bool = True  # step_size in pixel units along grad / max|grad|

    def __post_init__(self) -> None:
        if self.source_class == self.target_class:
            raise CraftError("source_class and target_class must differ")
        if not (0.0 < self.fraction <= 1.0):
            raise CraftError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.fraction > self.max_fraction:
            raise CraftError(f"fraction {self.fraction} exceeds guard {self.max_fraction} (raise max_fraction to override)")
        if self.iterations < 0:
            raise CraftError("iterations must be >= 0")
        if self.step_size <= 0:
            raise CraftError("step_size must be positive")
        if self.delta < 0 or math.isnan(self.delta):
            raise CraftError("delta must be nonnegative")


@dataclass(eq=False)
class PoisonRecord:
    poisoned_pixels: torch.Tensor
    clean_label: str  # always the target class
    source_id: str
    target_id: str
    final_loss: float
    initial_loss: float
    iterations_used: int
    delta: float
    loss_trace: List[float] = field(default_factory=list)
    patch_position: Optional[Tuple[int, int]] = None

    def to_manifest(self) -> Dict[str, object]:
        return {
            "source_id": self.source_id,
            "target_id": self.target_id,
            "label": self.clean_label,
            "iterations": self.iterations_used,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "delta": self.delta,
            "patch_position": list(self.patch_position) if self.patch_position else None,
        }


@dataclass(frozen=True)
class PoisonVerdict:
    flag: int  # 0 clean, 1 poisoned
    confidence: float  # P(poisoned)

    @classmethod
    def from_confidence(cls, confidence: float, threshold: float) -> "PoisonVerdict":
        # ties go to "poisoned"
        return cls(flag=1 if confidence >= threshold else 0, confidence=float(confidence))
