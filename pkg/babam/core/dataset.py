from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import torch

from .errors import DataError
from .types import ImageSample, ScenarioMode, ScenarioSpec

logger = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class Dataset:
    """Immutable ordered collection of samples plus its class index."""

    samples: Tuple[ImageSample, ...]
    class_index: Mapping[str, int]
    name: str = "dataset"
    _ids: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_index", dict(self.class_index))
        ids: Dict[str, int] = {}
        for pos, sample in enumerate(self.samples):
            if sample.label not in self.class_index:
                raise DataError(f"{sample.sample_id}: label {sample.label!r} missing from class index")
            if sample.sample_id in ids:
                raise DataError(f"duplicate sample id {sample.sample_id!r}")
            ids[sample.sample_id] = pos
        object.__setattr__(self, "_ids", ids)

    @classmethod
    def from_samples(cls, samples: Iterable[ImageSample], classes: Optional[Sequence[str]] = None,
                     name: str = "dataset") -> "Dataset":
        samples = tuple(samples)
        if classes is None:
            classes = sorted({s.label for s in samples})
        return cls(samples=samples, class_index={c: i for i, c in enumerate(classes)}, name=name)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ImageSample]:
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> ImageSample:
        try:
            return self.samples[self._ids[sample_id]]
        except KeyError:
            raise DataError(f"unknown sample id {sample_id!r}") from None

    def __contains__(self, sample_id: object) -> bool:
        return sample_id in self._ids

    @property
    def classes(self) -> List[str]:
        return sorted(self.class_index, key=self.class_index.__getitem__)

    @property
    def ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    @property
    def image_size(self) -> Optional[Tuple[int, int]]:
        return self.samples[0].size if self.samples else None

    @property
    def provenance_counts(self) -> Dict[str, Dict[str, int]]:
        counts = {c: {"clean": 0, "poisoned": 0} for c in self.classes}
        for s in self.samples:
            counts[s.label]["poisoned" if s.is_poisoned else "clean"] += 1
        return counts

    def benign(self) -> "Dataset":
        return self.filter(lambda s: not s.is_poisoned)

    def poisoned(self) -> "Dataset":
        return self.filter(lambda s: s.is_poisoned)

    def of_class(self, label: str) -> "Dataset":
        if label not in self.class_index:
            raise DataError(f"unknown class {label!r}")
        return self.filter(lambda s: s.label == label)

    def filter(self, predicate) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if predicate(s)), self.class_index, self.name)

    def with_samples(self, samples: Iterable[ImageSample]) -> "Dataset":
        return Dataset(tuple(samples), self.class_index, self.name)

    def extend(self, extra: Iterable[ImageSample]) -> "Dataset":
        return Dataset(self.samples + tuple(extra), self.class_index, self.name)

    def label_counts(self) -> Counter:
        return Counter(s.label for s in self.samples)

    def tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Stack into (N, 3, H, W) pixels and (N,) integer labels."""
        if not self.samples:
            raise DataError(f"{self.name}: dataset is empty")
        x = torch.stack([s.pixels for s in self.samples])
        y = torch.tensor([self.class_index[s.label] for s in self.samples], dtype=torch.long)
        return x, y


def mark_poisoned(dataset: Dataset, poisoned_ids: Set[str]) -> Dataset:
    """Set ground-truth provenance flags, e.g. after reloading a poisoned image folder."""
    unknown = set(poisoned_ids) - set(dataset.ids)
    if unknown:
        logger.warning(f"{len(unknown)} poisoned ids not present in {dataset.name}")
    return dataset.with_samples(
        s.replace(is_poisoned=s.sample_id in poisoned_ids) for s in dataset.samples
    )


def _require_classes(dataset: Dataset, names: Iterable[str]) -> None:
    missing = sorted({n for n in names if n not in dataset.class_index})
    if missing:
        raise DataError(f"unknown class(es) {missing} not in dataset {dataset.name}")


def _round_robin(groups: Sequence[List[ImageSample]], limit: int) -> List[ImageSample]:
    picked: List[ImageSample] = []
    cursors = [0] * len(groups)
    while len(picked) < limit:
        progressed = False
        for i, group in enumerate(groups):
            if cursors[i] < len(group) and len(picked) < limit:
                picked.append(group[cursors[i]])
                cursors[i] += 1
                progressed = True
        if not progressed:
            break
    return picked


def build_scenario(dataset: Dataset, spec: ScenarioSpec) -> Dataset:
    """Restrict/relabel a dataset into the binary or multiclass attack scenario."""
    _require_classes(dataset, spec.named_classes())

    if spec.mode == ScenarioMode.BINARY:
        if spec.source_class in spec.negative_classes:
            raise DataError(
                f"source class {spec.source_class!r} listed among negative classes; "
                "attacker images enter only through poisoning"
            )
        positives = [s.replace(label=POSITIVE) for s in dataset if s.label == spec.positive_class]
        groups = [[s for s in dataset if s.label == c] for c in sorted(spec.negative_classes)]
        pool = _round_robin(groups, limit=len(positives))
        negatives = [s.replace(label=NEGATIVE) for s in pool]
        if len(pool) < sum(len(g) for g in groups):
            logger.info(f"Negative pool capped to {len(pool)} to balance {len(positives)} positives")
        # keep original dataset order
        order = {s.sample_id: i for i, s in enumerate(dataset)}
        merged = sorted(positives + negatives, key=lambda s: order[s.sample_id])
        return Dataset(tuple(merged), {POSITIVE: 0, NEGATIVE: 1}, name=f"{dataset.name}:binary")

    keep = list(dict.fromkeys(spec.class_list))
    for c in (spec.source_class, spec.target_class):
        if c not in keep:
            raise DataError(f"multiclass scenario: class_list must contain {c!r}")
    keep_sorted = sorted(keep)
    samples = tuple(s for s in dataset if s.label in keep)
    return Dataset(samples, {c: i for i, c in enumerate(keep_sorted)}, name=f"{dataset.name}:multiclass")


def top_represented_classes(dataset: Dataset, count: int) -> List[str]:
    """The `count` classes with the most samples (ties broken by name)."""
    counts = dataset.label_counts()
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    return ranked[:count]


def split(dataset: Dataset, fractions: Tuple[float, float, float], seed: int,
          poisoned_in_eval: bool = False) -> Tuple[Dataset, Dataset, Dataset]:
    """Per-class stratified train/val/test split, deterministic per seed.

    Poisoned samples always land in train unless poisoned_in_eval is set.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DataError(f"fractions must be three nonnegative values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(fractions)}")
    parts_needed = sum(1 for f in fractions if f > 0)

    rng = np.random.default_rng(seed)
    buckets: Tuple[List[str], List[str], List[str]] = ([], [], [])
    by_class: Dict[str, List[ImageSample]] = defaultdict(list)
    for s in dataset:
        if s.is_poisoned and not poisoned_in_eval:
            buckets[0].append(s.sample_id)
        else:
            by_class[s.label].append(s)

    for label in sorted(by_class):
        members = by_class[label]
        n = len(members)
        if n < parts_needed:
            raise DataError(f"class {label!r} has {n} samples, fewer than the {parts_needed} split parts")
        order = rng.permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        n_val = min(n_val, n - n_train)
        cuts = (n_train, n_train + n_val)
        for rank, idx in enumerate(order):
            part = 0 if rank < cuts[0] else (1 if rank < cuts[1] else 2)
            buckets[part].append(members[idx].sample_id)

    names = ("train", "val", "test")
    out = []
    for name, ids in zip(names, buckets):
        wanted = set(ids)
        subset = tuple(s for s in dataset if s.sample_id in wanted)
        out.append(Dataset(subset, dataset.class_index, name=f"{dataset.name}:{name}"))
    logger.info(f"Split {dataset.name}: train={len(out[0])} val={len(out[1])} test={len(out[2])}")
    return out[0], out[1], out[2]


def scenario_target_label(spec: ScenarioSpec) -> str:
    """Label the target identity carries inside the scenario dataset."""
    return POSITIVE if spec.mode == ScenarioMode.BINARY else spec.target_class


def attacker_pool(dataset: Dataset, spec: ScenarioSpec) -> Dataset:
    """Images of the attacker (source) identity, with their original label."""
    _require_classes(dataset, [spec.source_class])
    members = tuple(s for s in dataset if s.label == spec.source_class)
    return Dataset(members, {spec.source_class: 0}, name=f"{dataset.name}:attacker")
