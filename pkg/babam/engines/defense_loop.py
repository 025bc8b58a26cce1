from __future__ import annotations

import logging
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from ..adapters.pirm_detector import PirmDetector
from ..core.dataset import Dataset
from ..core.detector import PoisonDetector
from ..core.errors import ModelError
from ..core.types import ImageSample, PoisonVerdict
from ..defenses.noisecal import ClassNoiseStats, NoiseConfig, Perturbation, compute_class_stats, perturb_flagged_image
from ..defenses.pirm import TrainedPirm
from ..models.classifier import TrainedModel, build_classifier
from ..models.spec import AugmentPolicy, ModelSpec
from ..models.training import train
from ..utils import derive_seed

logger = logging.getLogger(__name__)

DetectorLike = Union[PoisonDetector, TrainedPirm]


def as_detector(detector: DetectorLike) -> PoisonDetector:
    return PirmDetector(detector) if isinstance(detector, TrainedPirm) else detector


@dataclass
class ManifestEntry:
    sample_id: str
    label: str
    flag: int
    confidence: float
    perturbed: bool = False
    degenerate: bool = False
    distance: Optional[float] = None
    sensitivity: Optional[float] = None
    scale: Optional[float] = None
    seed: Optional[int] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            "id": self.sample_id,
            "class": self.label,
            "flag": self.flag,
            "confidence": self.confidence,
            "perturbed": self.perturbed,
            "degenerate": self.degenerate,
            "distance": self.distance,
            "sensitivity": self.sensitivity,
            "scale": self.scale,
            "seed": self.seed,
        }


@dataclass
class FilterManifest:
    detector: str
    epsilon: float
    entries: List[ManifestEntry] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def flagged_ids(self) -> List[str]:
        return [e.sample_id for e in self.entries if e.flag]

    @property
    def perturbed_ids(self) -> List[str]:
        return [e.sample_id for e in self.entries if e.perturbed]

    @property
    def degenerate_ids(self) -> List[str]:
        return [e.sample_id for e in self.entries if e.flag and not e.perturbed]

    def summary(self) -> Dict[str, object]:
        return {
            "detector": self.detector,
            "epsilon": self.epsilon,
            "images": len(self.entries),
            "flagged": len(self.flagged_ids),
            "perturbed": len(self.perturbed_ids),
            "degenerate_pass_through": len(self.degenerate_ids),
            "warnings": list(self.warnings),
        }

    def to_dict(self) -> Dict[str, object]:
        out = self.summary()
        out["entries"] = [e.to_dict() for e in self.entries]
        return out


class DefenseFilter:
    """Classify -> class statistics -> perturb flagged images.

    Statistics are computed once per pass over every member of each labeled
    class, before any image is perturbed. Nothing is dropped: the output has
    the input's cardinality, order and labels.
    """

    def __init__(self, detector: DetectorLike, config: NoiseConfig, max_workers: int = 1) -> None:
        self._detector = as_detector(detector)
        self._config = config
        self._max_workers = max(1, int(max_workers))
        self._logger = logging.getLogger(__name__)

    def _class_stats(self, untrusted: Dataset, labels: Sequence[str]) -> Dict[str, ClassNoiseStats]:
        members: Dict[str, List[ImageSample]] = defaultdict(list)
        wanted = set(labels)
        for s in untrusted:
            if s.label in wanted:
                members[s.label].append(s)
        return {
            label: compute_class_stats(members[label], label=label, squared=self._config.squared_distance)
            for label in sorted(members)
        }

    def run(self, untrusted: Dataset, seed: int) -> Tuple[Dataset, FilterManifest]:
        manifest = FilterManifest(detector=self._detector.name, epsilon=self._config.epsilon)
        samples = list(untrusted.samples)

        t0 = time.perf_counter()
        verdicts: List[PoisonVerdict] = self._detector.classify(samples) if samples else []
        if len(verdicts) != len(samples):
            raise ModelError(f"detector returned {len(verdicts)} verdicts for {len(samples)} images")
        manifest.timings["classify"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        flagged_labels = sorted({s.label for s, v in zip(samples, verdicts) if v.flag})
        stats = self._class_stats(untrusted, flagged_labels)
        manifest.timings["stats"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        jobs = [(i, s) for i, (s, v) in enumerate(zip(samples, verdicts)) if v.flag]

        def perturb(job: Tuple[int, ImageSample]) -> Tuple[int, Perturbation]:
            i, s = job
            return i, perturb_flagged_image(s, stats[s.label], self._config,
                                            seed=derive_seed(seed, s.sample_id), sample_id=s.sample_id)

        if self._max_workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self._max_workers) as pool:
                results = dict(pool.map(perturb, jobs))
        else:
            results = dict(map(perturb, jobs))

        out: List[ImageSample] = []
        for i, (s, v) in enumerate(zip(samples, verdicts)):
            entry = ManifestEntry(sample_id=s.sample_id, label=s.label, flag=v.flag, confidence=v.confidence)
            pert = results.get(i)
            if pert is None:
                out.append(s)
            else:
                entry.perturbed = pert.changed
                entry.degenerate = pert.degenerate
                entry.distance = pert.distance
                entry.sensitivity = pert.sensitivity
                entry.scale = pert.scale
                entry.seed = pert.seed
                if pert.changed:
                    # source_path dropped: the file on disk no longer matches the pixels
                    out.append(s.replace(pixels=pert.pixels, source_path=None))
                else:
                    self._logger.info(f"{s.sample_id}: flagged but passed through unperturbed "
                                      f"(sensitivity 0{', degenerate class' if pert.degenerate else ''})")
                    out.append(s)
            manifest.entries.append(entry)
        manifest.timings["perturb"] = time.perf_counter() - t0

        by_class: Dict[str, List[ManifestEntry]] = defaultdict(list)
        for e in manifest.entries:
            by_class[e.label].append(e)
        for label in sorted(by_class):
            entries = by_class[label]
            if all(e.flag for e in entries) and all(e.degenerate for e in entries):
                msg = f"class {label}: every image flagged and the class is degenerate, no noise applied"
                self._logger.warning(msg)
                manifest.warnings.append(msg)

        summary = manifest.summary()
        self._logger.info(f"Filter pass: {summary['flagged']}/{summary['images']} flagged, "
                          f"{summary['perturbed']} perturbed (epsilon={self._config.epsilon})")
        return untrusted.with_samples(out), manifest


def filter_training_set(untrusted: Dataset, detector: DetectorLike, config: NoiseConfig, seed: int,
                        max_workers: int = 1) -> Tuple[Dataset, FilterManifest]:
    return DefenseFilter(detector, config, max_workers=max_workers).run(untrusted, seed)


@dataclass
class DefenseRun:
    manifest: FilterManifest
    sanitized_dataset: Dataset
    trained_model: TrainedModel
    timing: Dict[str, float] = field(default_factory=dict)


def run_babam(untrusted: Dataset, model_spec: ModelSpec, detector: DetectorLike, config: NoiseConfig,
              seed: int, val_set: Optional[Dataset] = None, augment: Optional[AugmentPolicy] = None,
              device: Optional[str] = None, max_workers: int = 1) -> DefenseRun:
    """Filter the untrusted set, then train the model on the sanitized result."""
    if model_spec.num_classes != len(untrusted.class_index):
        raise ModelError(f"model expects {model_spec.num_classes} classes, "
                         f"dataset has {len(untrusted.class_index)}")
    started = time.perf_counter()
    sanitized, manifest = filter_training_set(untrusted, detector, config, seed, max_workers=max_workers)

    t0 = time.perf_counter()
    model = build_classifier(model_spec, device=device, seed=seed)
    model.class_index = dict(untrusted.class_index)
    trained = train(model, sanitized, val_set=val_set, augment=augment, seed=seed)
    timing = dict(manifest.timings)
    timing["train"] = time.perf_counter() - t0
    timing["total"] = time.perf_counter() - started
    logger.info("Defense run timings: " + ", ".join(f"{k}={v:.2f}s" for k, v in timing.items()))
    return DefenseRun(manifest=manifest, sanitized_dataset=sanitized, trained_model=trained, timing=timing)
