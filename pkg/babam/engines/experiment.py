from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

from ..adapters.class_detector import WholeClassDetector
from ..adapters.image_folder import load_image_directory
from ..adapters.oracle_detector import OracleDetector
from ..attacks.hidden_trigger import PoisonResult, poison_class_fraction
from ..config import ExperimentConfig
from ..core.dataset import Dataset, attacker_pool, build_scenario, split
from ..core.detector import PoisonDetector
from ..core.errors import DataError
from ..core.types import ScenarioMode, ScenarioSpec, TriggerPatch
from ..defenses.noisecal import NoiseConfig
from ..defenses.pirm import load_pirm
from ..models.classifier import TrainedModel, build_classifier
from ..models.spec import AugmentPolicy
from ..models.training import train
from ..utils import derive_seed, resolve_data_path
from .defense_loop import DefenseRun, DetectorLike, as_detector, run_babam
from .evaluation import EvalReport, evaluate_model

logger = logging.getLogger(__name__)

VARIANTS = ("clean", "undefended", "defended")


@dataclass
class PreparedData:
    spec: ScenarioSpec
    scenario: Dataset
    train: Dataset
    val: Dataset
    test: Dataset
    source_pool: Optional[Dataset]  # binary mode: attacker images live outside the scenario
    patch: TriggerPatch


def prepare_data(config: ExperimentConfig, seed: int, dataset: Optional[Dataset] = None) -> PreparedData:
    base = dataset if dataset is not None else load_image_directory(
        resolve_data_path(config.data.root), tuple(config.data.image_size))
    spec = config.scenario_spec(base)
    scenario = build_scenario(base, spec)
    train_set, val_set, test_set = split(scenario, tuple(config.eval.split), derive_seed(seed, "split"))
    pool = attacker_pool(base, spec) if spec.mode == ScenarioMode.BINARY else None
    return PreparedData(spec=spec, scenario=scenario, train=train_set, val=val_set, test=test_set,
                        source_pool=pool, patch=config.trigger_patch())


def resolve_detector(config: ExperimentConfig, detector: Optional[DetectorLike] = None) -> Optional[PoisonDetector]:
    if config.defense.perturbation_mode == "complete":
        return WholeClassDetector([config.target_label()])
    if detector is not None:
        return as_detector(detector)
    kind = config.defense.detector
    if kind == "oracle":
        return OracleDetector()
    if kind == "whole-class":
        return WholeClassDetector([config.target_label()])
    if kind == "pirm":
        if not config.defense.pirm_checkpoint:
            raise DataError("defense.detector is 'pirm' but no pirm_checkpoint is configured")
        return as_detector(load_pirm(config.defense.pirm_checkpoint))
    return None


def effective_noise(config: ExperimentConfig) -> NoiseConfig:
    if config.defense.perturbation_mode == "complete":
        return config.noise_config(epsilon=config.defense.complete_epsilon)
    return config.noise_config()


@dataclass
class CycleResult:
    reports: Dict[str, EvalReport] = field(default_factory=dict)
    models: Dict[str, TrainedModel] = field(default_factory=dict)
    poison: Optional[PoisonResult] = None
    defense: Optional[DefenseRun] = None
    timings: Dict[str, float] = field(default_factory=dict)


def fit_model(config: ExperimentConfig, train_set: Dataset, val_set: Dataset, seed: int,
              device: Optional[str]) -> TrainedModel:
    model = build_classifier(config.model_spec(len(train_set.class_index)), device=device, seed=seed)
    model.class_index = dict(train_set.class_index)
    augment = AugmentPolicy() if config.model.augment else AugmentPolicy.none()
    return train(model, train_set, val_set=val_set, augment=augment, seed=seed)


def run_cycle(config: ExperimentConfig, seed: Optional[int] = None, dataset: Optional[Dataset] = None,
              variants: Sequence[str] = VARIANTS, detector: Optional[DetectorLike] = None,
              device: Optional[str] = None, progress: bool = False) -> CycleResult:
    """One full poison -> train -> (defend) -> evaluate cycle.

    A clean model is always trained: it is the attacker's feature extractor and
    the natural-misclassification baseline. Every model in the cycle shares the
    same training seed.
    """
    unknown = sorted(set(variants) - set(VARIANTS))
    if unknown:
        raise DataError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    seed = config.seed if seed is None else seed
    result = CycleResult()
    snapshot = config.to_dict()
    snapshot["seed"] = seed

    t0 = time.perf_counter()
    data = prepare_data(config, seed, dataset)
    target = config.target_label()
    result.timings["prepare"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    clean = fit_model(config, data.train, data.val, seed, device)
    result.models["clean"] = clean
    result.timings["train_clean"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    poison = poison_class_fraction(
        data.train, config.poison_plan(), clean.feature_fn(config.poison.feature_layer),
        derive_seed(seed, "poison"), data.patch, source_pool=data.source_pool, progress=progress,
    )
    result.poison = poison
    result.timings["poison"] = time.perf_counter() - t0

    if data.spec.mode == ScenarioMode.BINARY:
        queries = poison.reserved_sources
    else:
        queries = data.test.of_class(data.spec.source_class)
    if len(queries) == 0:
        raise DataError("no held-out attacker images left for patched queries")
    eval_seed = derive_seed(seed, "eval")

    def report(name: str, model: TrainedModel, extra: Optional[dict] = None) -> None:
        rep = evaluate_model(model, data.test, queries, data.patch, target, trials=config.eval.trials,
                             seed=eval_seed, label=name, config_snapshot=snapshot, baseline_model=clean)
        if extra:
            rep.extra.update(extra)
        result.reports[name] = rep

    if "clean" in variants:
        report("clean", clean)

    if "undefended" in variants:
        t0 = time.perf_counter()
        undefended = fit_model(config, poison.dataset, data.val, seed, device)
        result.models["undefended"] = undefended
        result.timings["train_undefended"] = time.perf_counter() - t0
        report("undefended", undefended, {"poisons": len(poison.records)})

    if "defended" in variants:
        chosen = resolve_detector(config, detector)
        if chosen is None:
            logger.warning("defense.detector is 'none', skipping the defended variant")
        else:
            noise = effective_noise(config)
            augment = AugmentPolicy() if config.model.augment else AugmentPolicy.none()
            run = run_babam(poison.dataset, config.model_spec(len(poison.dataset.class_index)), chosen,
                            noise, seed, val_set=data.val, augment=augment, device=device)
            result.defense = run
            result.models["defended"] = run.trained_model
            for stage, seconds in run.timing.items():
                result.timings[f"defense_{stage}"] = seconds
            report("defended", run.trained_model, {
                "detector": chosen.name,
                "epsilon": noise.epsilon,
                "flagged": len(run.manifest.flagged_ids),
                "perturbed": len(run.manifest.perturbed_ids),
            })
    return result
