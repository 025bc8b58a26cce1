from __future__ import annotations

from typing import Iterable, List


class BabamError(Exception):
    """Root of every error raised by the toolkit."""


class ConfigValidationError(BabamError):
    """Experiment configuration rejected; carries every violation found."""

    def __init__(self, violations: Iterable[str]) -> None:
        self.violations: List[str] = list(violations)
        super().__init__("invalid configuration: " + "; ".join(self.violations))


class DataError(BabamError):
    """Dataset ingestion, scenario construction or splitting failed."""


class CraftError(BabamError):
    """Poison crafting failed (bad plan, non-finite loss, impossible patch placement)."""


class ModelError(BabamError):
    """Classifier construction, prediction or feature extraction failed."""


class TrainingError(BabamError):
    """Training aborted."""


class NoiseError(BabamError):
    """Calibrated-noise computation failed."""


class ReportError(BabamError):
    """Artifacts could not be written."""
