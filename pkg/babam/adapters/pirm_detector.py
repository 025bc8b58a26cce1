from __future__ import annotations

import logging
from typing import List, Sequence

from ..core.detector import PoisonDetector
from ..core.errors import ModelError
from ..core.types import ImageSample, PoisonVerdict
from ..defenses.pirm import TrainedPirm, classify_poisons

logger = logging.getLogger(__name__)


class PirmDetector(PoisonDetector):
    """Detector backed by a trained poison image recognition model."""

    name = "pirm"

    def __init__(self, pirm: TrainedPirm, batch_size: int = 256) -> None:
        self._pirm = pirm
        self._batch_size = batch_size

    @property
    def pirm(self) -> TrainedPirm:
        return self._pirm

    def check_compatible(self, samples: Sequence[ImageSample]) -> None:
        expected = tuple(self._pirm.image_size)
        for s in samples:
            if s.size != expected:
                raise ModelError(
                    f"{s.sample_id}: image size {s.size} does not match PIRM input {expected}"
                )

    def classify(self, samples: Sequence[ImageSample]) -> List[PoisonVerdict]:
        self.check_compatible(samples)
        verdicts: List[PoisonVerdict] = []
        for start in range(0, len(samples), self._batch_size):
            verdicts.extend(classify_poisons(self._pirm, samples[start:start + self._batch_size]))
        flagged = sum(v.flag for v in verdicts)
        logger.info(f"PIRM flagged {flagged}/{len(verdicts)} images (threshold={self._pirm.threshold})")
        return verdicts
