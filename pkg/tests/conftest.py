from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pytest
import torch
from PIL import Image

from babam.config import (
    DataConfig,
    DefenseConfig,
    EvalConfig,
    ExperimentConfig,
    ModelConfig,
    PoisonConfig,
    ScenarioConfig,
)
from babam.core.dataset import Dataset
from babam.core.types import ImageSample
from babam.models.spec import ModelSpec, TrainHyperParams
from babam.utils import setup_logging

SIZE = 16


@pytest.fixture(autouse=True, scope="session")
def _logging() -> None:
    setup_logging("WARNING")


def make_sample(sample_id: str, label: str, value: float | Sequence[float] = 0.5, size: int = SIZE,
                poisoned: bool = False, noise: float = 0.0, seed: int = 0) -> ImageSample:
    """Solid-colour image, optionally with uniform per-pixel noise."""
    color = torch.tensor(value if isinstance(value, Sequence) else [value] * 3, dtype=torch.float32)
    pixels = color.view(3, 1, 1).expand(3, size, size).clone()
    if noise:
        gen = torch.Generator().manual_seed(seed)
        pixels = (pixels + noise * (torch.rand(3, size, size, generator=gen) - 0.5)).clamp(0.0, 1.0)
    return ImageSample(sample_id=sample_id, pixels=pixels, label=label, is_poisoned=poisoned)


def make_dataset(counts: Dict[str, int], size: int = SIZE, noise: float = 0.2, seed: int = 0,
                 colors: Optional[Dict[str, Sequence[float]]] = None) -> Dataset:
    """One solid colour per class (distinct hues) plus noise; ids are `<class>/<k>.png`."""
    rng = np.random.default_rng(seed)
    samples: List[ImageSample] = []
    for ci, (label, n) in enumerate(sorted(counts.items())):
        color = (colors or {}).get(label) or rng.uniform(0.15, 0.85, size=3).tolist()
        for k in range(n):
            samples.append(make_sample(f"{label}/{k:03d}.png", label, color, size=size, noise=noise,
                                       seed=seed * 100_003 + ci * 1_009 + k))
    return Dataset.from_samples(samples, name="synthetic")


def write_image_folder(root: Path, counts: Dict[str, int], size: int = SIZE, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    for label, n in sorted(counts.items()):
        (root / label).mkdir(parents=True, exist_ok=True)
        base = rng.integers(0, 256, size=3)
        for k in range(n):
            arr = np.clip(base + rng.integers(-20, 21, size=(size, size, 3)), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(root / label / f"{k:03d}.png")
    return root


def tiny_spec(num_classes: int = 2, **changes) -> ModelSpec:
    hp = changes.pop("hyperparams", TrainHyperParams(epochs=3, learning_rate=1e-3, batch_size=16, optimizer="adam"))
    return ModelSpec(num_classes=num_classes, head_widths=(32,), image_size=(SIZE, SIZE), hyperparams=hp,
                     **changes)


def tiny_config(seed: int = 0, **sections) -> ExperimentConfig:
    """Multiclass S -> T (+ U) experiment sized for seconds on CPU; pair with tiny_dataset()."""
    values = dict(
        data=DataConfig(root="", image_size=(SIZE, SIZE)),
        scenario=ScenarioConfig(mode="multiclass", source_class="S", target_class="T", class_list=("S", "T", "U")),
        poison=PoisonConfig(fraction=0.5, iterations=2, patch_size=4),
        model=ModelConfig(head_widths=(16,), epochs=1, learning_rate=1e-3, batch_size=16, optimizer="adam",
                          augment=False),
        defense=DefenseConfig(detector="oracle", epsilon=0.1),
        eval=EvalConfig(trials=2, split=(0.6, 0.2, 0.2)),
    )
    values.update(sections)
    return ExperimentConfig(seed=seed, name="tiny", **values)


def tiny_dataset() -> Dataset:
    return make_dataset({"S": 10, "T": 10, "U": 10}, noise=0.3)


def ids(samples: Iterable[ImageSample]) -> List[str]:
    return [s.sample_id for s in samples]


@pytest.fixture
def image_folder(tmp_path: Path) -> Path:
    return write_image_folder(tmp_path / "faces", {"alice": 3, "bob": 3})
