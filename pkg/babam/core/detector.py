from __future__ import annotations

from abc import ABC, abstractmethod
from typing import List, Sequence

from .types import ImageSample, PoisonVerdict


class PoisonDetector(ABC):
    """Abstract detector that flags training images as clean (0) or poisoned (1)."""

    name: str = "detector"

    @abstractmethod
    def classify(self, samples: Sequence[ImageSample]) -> List[PoisonVerdict]:
        """Return one verdict per sample, in input order."""

    def check_compatible(self, samples: Sequence[ImageSample]) -> None:
        """Raise if the detector cannot consume these samples."""
