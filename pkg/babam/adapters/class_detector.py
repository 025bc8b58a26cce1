from __future__ import annotations

from typing import Iterable, List, Sequence

from ..core.detector import PoisonDetector
from ..core.types import ImageSample, PoisonVerdict


class WholeClassDetector(PoisonDetector):
    """Flags every image of the given classes (complete perturbation)."""

    name = "whole-class"

    def __init__(self, classes: Iterable[str]) -> None:
        self._classes = frozenset(classes)

    @property
    def classes(self) -> frozenset:
        return self._classes

    def classify(self, samples: Sequence[ImageSample]) -> List[PoisonVerdict]:
        out = []
        for s in samples:
            hit = s.label in self._classes
            out.append(PoisonVerdict(flag=int(hit), confidence=1.0 if hit else 0.0))
        return out
