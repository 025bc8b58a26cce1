from __future__ import annotations

from typing import List, Sequence

from ..core.detector import PoisonDetector
from ..core.types import ImageSample, PoisonVerdict


class OracleDetector(PoisonDetector):
    """Test double that reads the ground-truth provenance flag of each sample.

    Lets the filter pipeline and the noise stage be exercised without depending
    on how good a trained recognizer is.
    """

    name = "oracle"

    def classify(self, samples: Sequence[ImageSample]) -> List[PoisonVerdict]:
        return [PoisonVerdict(flag=int(s.is_poisoned), confidence=1.0 if s.is_poisoned else 0.0)
                for s in samples]
