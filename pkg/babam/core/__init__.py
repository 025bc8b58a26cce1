"""Core entities, dataset operations and interfaces."""

from .types import (
    AnchorPolicy,
    ImageSample,
    PoisonPlan,
    PoisonRecord,
    PoisonVerdict,
    ScenarioMode,
    ScenarioSpec,
    TriggerPatch,
)
from .dataset import (
    NEGATIVE,
    POSITIVE,
    Dataset,
    attacker_pool,
    build_scenario,
    mark_poisoned,
    scenario_target_label,
    split,
    top_represented_classes,
)
from .detector import PoisonDetector
from .errors import (
    BabamError,
    ConfigValidationError,
    CraftError,
    DataError,
    ModelError,
    NoiseError,
    ReportError,
    TrainingError,
)

__all__ = [
    "AnchorPolicy",
    "ImageSample",
    "PoisonPlan",
    "PoisonRecord",
    "PoisonVerdict",
    "ScenarioMode",
    "ScenarioSpec",
    "TriggerPatch",
    "NEGATIVE",
    "POSITIVE",
    "Dataset",
    "attacker_pool",
    "build_scenario",
    "mark_poisoned",
    "scenario_target_label",
    "split",
    "top_represented_classes",
    "PoisonDetector",
    "BabamError",
    "ConfigValidationError",
    "CraftError",
    "DataError",
    "ModelError",
    "NoiseError",
    "ReportError",
    "TrainingError",
]
