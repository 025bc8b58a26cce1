"""Declarative experiment configuration.

A JSON file is merged over a named profile (`desk` or `full`) and parsed into
the section dataclasses below. Validation collects every violation (unknown
keys, missing keys, wrong types, out-of-range values, missing paths) and
raises them together as one ConfigValidationError.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from .attacks.patch import load_patch
from .core.dataset import POSITIVE, Dataset, top_represented_classes
from .core.errors import BabamError, ConfigValidationError
from .core.types import AnchorPolicy, PoisonPlan, ScenarioMode, ScenarioSpec, TriggerPatch
from .defenses.noisecal import NoiseConfig
from .defenses.pirm import PIRM_PROFILES, PirmSpec
from .models.registry import available_backbones
from .models.spec import FreezeMode, ModelSpec, TrainHyperParams
from .utils import derive_seed, resolve_data_path

SWEEP_AXES = ("poison_fraction", "epsilon", "architecture", "perturbation_mode")
DETECTORS = ("oracle", "pirm", "whole-class", "none")
PERTURBATION_MODES = ("selective", "complete")

DEFAULT_SWEEP_VALUES: Dict[str, Tuple[Any, ...]] = {
    "poison_fraction": (0.15, 0.30, 0.50, 0.80),
    "epsilon": (0.5, 0.1, 0.05, 0.01, 0.005),
    "architecture": ("desk-convnet:frozen", "desk-convnet:unfrozen"),
    "perturbation_mode": ("complete", "selective"),
}


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    image_size: Tuple[int, int] = (64, 64)
    pirm_corpus: Optional[str] = None  # non-face corpus for train-pirm
    max_workers: int = 4

    def problems(self) -> List[str]:
        out = []
        if not self.root:
            out.append("data.root: required")
        elif not resolve_data_path(self.root).is_dir():
            out.append(f"data.root: directory not found: {resolve_data_path(self.root)}")
        if self.pirm_corpus and not resolve_data_path(self.pirm_corpus).is_dir():
            out.append(f"data.pirm_corpus: directory not found: {resolve_data_path(self.pirm_corpus)}")
        if min(self.image_size) < 1:
            out.append("data.image_size: values must be positive")
        if self.max_workers < 1:
            out.append("data.max_workers: must be >= 1")
        return out


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "multiclass"
    source_class: str = ""
    target_class: str = ""
    negative_classes: Tuple[str, ...] = ()
    class_list: Tuple[str, ...] = ()
    top_classes: Optional[int] = None  # multiclass: keep the N most represented classes

    def problems(self) -> List[str]:
        out = []
        if self.mode not in {m.value for m in ScenarioMode}:
            out.append(f"scenario.mode: must be one of {[m.value for m in ScenarioMode]}")
        if not self.source_class:
            out.append("scenario.source_class: required")
        if not self.target_class:
            out.append("scenario.target_class: required")
        if self.source_class and self.source_class == self.target_class:
            out.append("scenario.target_class: must differ from source_class")
        if self.mode == ScenarioMode.BINARY.value and not self.negative_classes:
            out.append("scenario.negative_classes: required in binary mode")
        if self.mode == ScenarioMode.MULTICLASS.value and not self.class_list and not self.top_classes:
            out.append("scenario.class_list: required in multiclass mode (or set top_classes)")
        if self.top_classes is not None and self.top_classes < 2:
            out.append("scenario.top_classes: must be >= 2")
        return out


@dataclass(frozen=True)
class PoisonConfig:
    fraction: float = 0.8
    iterations: int = 200
    step_size: float = 0.01
    delta: float = 16.0 / 255.0
    feature_layer: str = "features"
    max_fraction: float = 0.8
    patch_size: int = 8
    patch_seed: Optional[int] = None
    patch_file: Optional[str] = None

    def problems(self) -> List[str]:
        out = []
        if not (0.0 < self.fraction <= 1.0):
            out.append("poison.fraction: must be in (0, 1]")
        elif self.fraction > self.max_fraction:
            out.append(f"poison.fraction: {self.fraction} exceeds max_fraction {self.max_fraction}")
        if self.iterations < 0:
            out.append("poison.iterations: must be >= 0")
        if self.step_size <= 0:
            out.append("poison.step_size: must be positive")
        if self.delta < 0:
            out.append("poison.delta: must be >= 0")
        if self.patch_size < 0:
            out.append("poison.patch_size: must be >= 0")
        if self.patch_file and not Path(self.patch_file).is_file():
            out.append(f"poison.patch_file: file not found: {self.patch_file}")
        return out


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "desk-convnet"
    freeze_mode: str = "unfrozen"
    freeze_k: Optional[int] = None
    head_widths: Tuple[int, ...] = (256, 128)
    dropout: float = 0.35
    pretrained: bool = False
    epochs: int = 15
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    optimizer: str = "sgd"
    augment: bool = True

    def problems(self) -> List[str]:
        out = []
        if self.backbone not in available_backbones():
            out.append(f"model.backbone: unknown {self.backbone!r}; registered {available_backbones()}")
        if self.freeze_mode not in {m.value for m in FreezeMode}:
            out.append(f"model.freeze_mode: must be one of {[m.value for m in FreezeMode]}")
        if self.freeze_mode == FreezeMode.FREEZE_FIRST_K.value and (self.freeze_k is None or self.freeze_k < 0):
            out.append("model.freeze_k: required and >= 0 for freeze_first_k")
        if not (0.0 <= self.dropout < 1.0):
            out.append("model.dropout: must be in [0, 1)")
        if self.epochs < 0:
            out.append("model.epochs: must be >= 0")
        if self.learning_rate <= 0:
            out.append("model.learning_rate: must be positive")
        if self.batch_size < 1:
            out.append("model.batch_size: must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            out.append("model.optimizer: must be 'sgd' or 'adam'")
        return out


@dataclass(frozen=True)
class DefenseConfig:
    detector: str = "oracle"
    pirm_checkpoint: Optional[str] = None
    epsilon: float = 0.01
    perturbation_mode: str = "selective"
    complete_epsilon: float = 0.5
    squared_distance: bool = False
    sensitivity_floor: float = 1e-8

    def problems(self) -> List[str]:
        out = []
        if self.detector not in DETECTORS:
            out.append(f"defense.detector: must be one of {list(DETECTORS)}")
        if self.detector == "pirm" and self.pirm_checkpoint and not Path(self.pirm_checkpoint).is_dir():
            out.append(f"defense.pirm_checkpoint: directory not found: {self.pirm_checkpoint}")
        if self.perturbation_mode not in PERTURBATION_MODES:
            out.append(f"defense.perturbation_mode: must be one of {list(PERTURBATION_MODES)}")
        if self.epsilon <= 0:
            out.append("defense.epsilon: must be positive")
        if self.complete_epsilon <= 0:
            out.append("defense.complete_epsilon: must be positive")
        if self.sensitivity_floor <= 0:
            out.append("defense.sensitivity_floor: must be positive")
        return out


@dataclass(frozen=True)
class PirmConfig:
    profile: str = "desk"
    unfrozen_tail: Optional[int] = None
    threshold: float = 0.5
    poison_fraction_of_classes: float = 0.5
    max_per_label: Optional[int] = None
    epochs: Optional[int] = None

    def problems(self) -> List[str]:
        out = []
        if self.profile not in PIRM_PROFILES:
            out.append(f"pirm.profile: must be one of {sorted(PIRM_PROFILES)}")
        if self.unfrozen_tail is not None and self.unfrozen_tail < 1:
            out.append("pirm.unfrozen_tail: must be >= 1")
        if not (0.0 < self.threshold < 1.0):
            out.append("pirm.threshold: must be in (0, 1)")
        if not (0.0 < self.poison_fraction_of_classes < 1.0):
            out.append("pirm.poison_fraction_of_classes: must be in (0, 1)")
        if self.epochs is not None and self.epochs < 0:
            out.append("pirm.epochs: must be >= 0")
        return out


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 5
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    sweep_axis: Optional[str] = None
    sweep_values: Optional[Tuple[Any, ...]] = None

    def problems(self) -> List[str]:
        out = []
        if self.trials < 1:
            out.append("eval.trials: must be >= 1")
        if any(v < 0 for v in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            out.append("eval.split: three nonnegative fractions summing to 1")
        elif self.split[0] <= 0 or self.split[2] <= 0:
            out.append("eval.split: train and test fractions must be positive")
        if self.sweep_axis is not None and self.sweep_axis not in SWEEP_AXES:
            out.append(f"eval.sweep_axis: must be one of {list(SWEEP_AXES)}")
        if self.sweep_values is not None and len(self.sweep_values) == 0:
            out.append("eval.sweep_values: must be nonempty")
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    name: str = "experiment"
    profile: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    pirm: PirmConfig = field(default_factory=PirmConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # --- derived domain objects ---

    @property
    def mode(self) -> ScenarioMode:
        return ScenarioMode(self.scenario.mode)

    def scenario_spec(self, dataset: Optional[Dataset] = None) -> ScenarioSpec:
        sc = self.scenario
        if self.mode == ScenarioMode.BINARY:
            return ScenarioSpec(mode=ScenarioMode.BINARY, source_class=sc.source_class,
                                target_class=sc.target_class, negative_classes=tuple(sc.negative_classes))
        class_list = tuple(sc.class_list)
        if not class_list and sc.top_classes and dataset is not None:
            class_list = tuple(top_represented_classes(dataset, sc.top_classes))
            for c in (sc.source_class, sc.target_class):
                if c not in class_list:
                    class_list += (c,)
        return ScenarioSpec(mode=ScenarioMode.MULTICLASS, source_class=sc.source_class,
                            target_class=sc.target_class, class_list=class_list)

    def target_label(self) -> str:
        return POSITIVE if self.mode == ScenarioMode.BINARY else self.scenario.target_class

    def poison_plan(self) -> PoisonPlan:
        p = self.poison
        return PoisonPlan(
            source_class=self.scenario.source_class,
            target_class=self.target_label(),
            fraction=p.fraction,
            iterations=p.iterations,
            step_size=p.step_size,
            delta=p.delta,
            feature_layer=p.feature_layer,
            max_fraction=p.max_fraction,
        )

    def trigger_patch(self) -> TriggerPatch:
        if self.poison.patch_file:
            return load_patch(self.poison.patch_file, anchor=AnchorPolicy.RANDOM)
        seed = self.poison.patch_seed if self.poison.patch_seed is not None else derive_seed(self.seed, "patch")
        return TriggerPatch.random(size=self.poison.patch_size, seed=seed)

    def model_spec(self, num_classes: int) -> ModelSpec:
        m = self.model
        return ModelSpec(
            backbone=m.backbone,
            num_classes=num_classes,
            freeze_mode=FreezeMode(m.freeze_mode),
            freeze_k=m.freeze_k,
            head_widths=tuple(m.head_widths),
            dropout=m.dropout,
            image_size=tuple(self.data.image_size),
            pretrained=m.pretrained,
            hyperparams=TrainHyperParams(epochs=m.epochs, learning_rate=m.learning_rate, momentum=m.momentum,
                                         batch_size=m.batch_size, optimizer=m.optimizer),
        )

    def noise_config(self, epsilon: Optional[float] = None) -> NoiseConfig:
        d = self.defense
        return NoiseConfig(epsilon=epsilon if epsilon is not None else d.epsilon,
                           squared_distance=d.squared_distance, sensitivity_floor=d.sensitivity_floor)

    def pirm_spec(self) -> PirmSpec:
        base = PIRM_PROFILES[self.pirm.profile]
        changes: Dict[str, Any] = {"threshold": self.pirm.threshold}
        if self.pirm.unfrozen_tail is not None:
            changes["unfrozen_tail"] = self.pirm.unfrozen_tail
        if base.backbone == "desk-convnet":
            changes["image_size"] = tuple(self.data.image_size)
        if self.pirm.epochs is not None:
            changes["hyperparams"] = replace(base.hyperparams, epochs=self.pirm.epochs)
        return replace(base, **changes)

    def with_section(self, section: str, **changes: Any) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **changes)})

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


SECTIONS = {
    "data": DataConfig,
    "scenario": ScenarioConfig,
    "poison": PoisonConfig,
    "model": ModelConfig,
    "defense": DefenseConfig,
    "pirm": PirmConfig,
    "eval": EvalConfig,
}
TOP_LEVEL = ("seed", "name", "profile", *SECTIONS)

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": {
        "model": {"epochs": 24, "learning_rate": 0.0001, "momentum": 0.9, "batch_size": 256},
        "pirm": {"profile": "full-layers"},
    },
}

_NONE = type(None)


def _coerce(value: Any, hint: Any, where: str, errors: List[str]) -> Any:
    origin, args = get_origin(hint), get_args(hint)
    if hint is Any:
        return value
    if origin is Union:
        if value is None and _NONE in args:
            return None
        inner = [a for a in args if a is not _NONE]
        return _coerce(value, inner[0], where, errors)
    if hint is bool:
        if not isinstance(value, bool):
            errors.append(f"{where}: expected boolean, got {type(value).__name__}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{where}: expected integer, got {type(value).__name__}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{where}: expected number, got {type(value).__name__}")
            return value
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            errors.append(f"{where}: expected string, got {type(value).__name__}")
        return value
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            errors.append(f"{where}: expected list, got {type(value).__name__}")
            return value
        if origin is tuple and args and args[-1] is not Ellipsis and len(args) != len(value):
            errors.append(f"{where}: expected {len(args)} values, got {len(value)}")
            return tuple(value)
        item_hint = args[0] if args else Any
        items = [
            _coerce(v, item_hint if (origin is list or args[-1] is Ellipsis) else args[i], f"{where}[{i}]", errors)
            for i, v in enumerate(value)
        ]
        return tuple(items) if origin is tuple else items
    return value


def _parse_section(cls, raw: Any, where: str, errors: List[str]):
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected an object")
        return cls()
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in sorted(set(raw) - known):
        errors.append(f"{where}.{key}: unknown key")
    values = {}
    for k in raw:
        if k not in known:
            continue
        before = len(errors)
        value = _coerce(raw[k], hints[k], f"{where}.{k}", errors)
        # ill-typed values fall back to the default so range checks still run on the rest
        if len(errors) == before:
            values[k] = value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        errors.append(f"{where}: {e}")
        return cls()


def _merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(raw: Any, profile: Optional[str] = None, seed: Optional[int] = None,
                 check_paths: bool = True) -> ExperimentConfig:
    """Build and validate an ExperimentConfig; every violation is reported at once."""
    errors: List[str] = []
    if not isinstance(raw, dict):
        raise ConfigValidationError(["config: top level must be an object"])
    profile = profile or raw.get("profile", "desk")
    if profile not in PROFILES:
        errors.append(f"profile: must be one of {sorted(PROFILES)}")
        profile = "desk"
    merged = _merge(PROFILES[profile], raw)
    merged["profile"] = profile
    if seed is not None:
        merged["seed"] = seed

    for key in sorted(set(merged) - set(TOP_LEVEL)):
        errors.append(f"{key}: unknown key")
    if "seed" not in merged:
        errors.append("seed: required")
    seed_value = _coerce(merged.get("seed", 0), int, "seed", errors)
    name = _coerce(merged.get("name", "experiment"), str, "name", errors)
    sections = {k: _parse_section(cls, merged.get(k, {}), k, errors) for k, cls in SECTIONS.items()}

    for section in sections.values():
        try:
            problems = section.problems()
        except (TypeError, ValueError, BabamError) as e:
            problems = [f"{type(section).__name__}: {e}"]
        if not check_paths:
            problems = [p for p in problems if "not found" not in p]
        errors.extend(problems)

    if errors:
        raise ConfigValidationError(errors)
    return ExperimentConfig(seed=seed_value, name=name, profile=profile, **sections)


def load_config(path: str | os.PathLike, profile: Optional[str] = None, seed: Optional[int] = None,
                check_paths: bool = True) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigValidationError([f"config: file not found: {p}"])
    try:
        with open(p, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigValidationError([f"config: invalid JSON at line {e.lineno}: {e.msg}"]) from e
    return parse_config(raw, profile=profile, seed=seed, check_paths=check_paths)
