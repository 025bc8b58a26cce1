from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..core.errors import NoiseError
from ..core.types import ImageSample

logger = logging.getLogger(__name__)

ImageLike = Union[ImageSample, torch.Tensor]


@dataclass(frozen=True)
class NoiseConfig:
    epsilon: float = 0.01  # smaller epsilon, more noise
    squared_distance: bool = False  # ablation: squared L2 instead of L2
    sensitivity_floor: float = 1e-8
    clip: bool = True

    def __post_init__(self) -> None:
        if not (self.epsilon > 0) or not math.isfinite(self.epsilon):
            raise NoiseError(f"epsilon must be positive, got {self.epsilon}")
        if not (self.sensitivity_floor > 0):
            raise NoiseError(f"sensitivity_floor must be positive, got {self.sensitivity_floor}")


@dataclass(eq=False)
class ClassNoiseStats:
    label: str
    mean_image: torch.Tensor
    max_distance: float
    per_image_distance: Dict[str, float] = field(default_factory=dict)
    squared: bool = False

    def is_degenerate(self, floor: float) -> bool:
        return self.max_distance < floor


def _pixels(image: ImageLike) -> torch.Tensor:
    return image.pixels if isinstance(image, ImageSample) else image


def class_mean_image(images: Sequence[ImageLike]) -> torch.Tensor:
    """Elementwise arithmetic mean of the class images."""
    if len(images) == 0:
        raise NoiseError("cannot average an empty image list")
    tensors = [_pixels(im) for im in images]
    shape = tuple(tensors[0].shape)
    for t in tensors[1:]:
        if tuple(t.shape) != shape:
            raise NoiseError(f"mixed image dims in class: {shape} vs {tuple(t.shape)}")
    # accumulate in float64 so identical inputs average back to themselves exactly
    mean = torch.stack([t.double() for t in tensors]).mean(dim=0)
    return mean.to(tensors[0].dtype)


def image_distance(image: ImageLike, mean_image: torch.Tensor, squared: bool = False) -> float:
    """L2 norm of (image - mean) over all flattened pixels."""
    diff = (_pixels(image).double() - mean_image.double()).flatten()
    dist = float(torch.linalg.vector_norm(diff).item())
    return dist * dist if squared else dist


def compute_class_stats(samples: Sequence[ImageSample], label: Optional[str] = None,
                        squared: bool = False) -> ClassNoiseStats:
    """Mean image, per-image distance to it and the maximum distance over the whole class."""
    if len(samples) == 0:
        raise NoiseError(f"class {label!r} has no images")
    label = label if label is not None else samples[0].label
    mean = class_mean_image(samples)
    distances = {s.sample_id: image_distance(s, mean, squared) for s in samples}
    stats = ClassNoiseStats(
        label=label,
        mean_image=mean,
        max_distance=max(distances.values()),
        per_image_distance=distances,
        squared=squared,
    )
    logger.debug(f"Class {label}: n={len(samples)} E_max={stats.max_distance:.4f}")
    return stats


def normalized_sensitivity(image: ImageLike, stats: ClassNoiseStats, floor: float = 1e-8,
                           sample_id: Optional[str] = None) -> float:
    """Distance to the class mean divided by the class maximum distance.

    A class whose maximum distance is below `floor` is degenerate: every image
    gets sensitivity 0, meaning no calibrated noise.
    """
    if stats.is_degenerate(floor):
        return 0.0
    if sample_id is not None and sample_id in stats.per_image_distance:
        dist = stats.per_image_distance[sample_id]
    else:
        dist = image_distance(image, stats.mean_image, stats.squared)
    return dist / stats.max_distance


def sample_laplace_noise(scale: float, dims: Tuple[int, ...], seed: int,
                         dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """i.i.d. zero-mean Laplace(scale) values, one per element of `dims`."""
    if not (scale > 0) or not math.isfinite(scale):
        raise NoiseError(f"Laplace scale must be positive and finite, got {scale}")
    rng = np.random.default_rng(seed)
    noise = rng.laplace(0.0, scale, size=tuple(int(d) for d in dims))
    return torch.from_numpy(noise).to(dtype)


@dataclass(eq=False)
class Perturbation:
    pixels: torch.Tensor  # perturbed (and clipped) image
    noise: Optional[torch.Tensor]  # pre-clip noise, None when nothing was added
    distance: float
    sensitivity: float
    scale: float
    seed: int
    degenerate: bool = False

    @property
    def changed(self) -> bool:
        return self.noise is not None

    def audit(self, sample_id: str, label: str) -> Dict[str, object]:
        return {
            "id": sample_id,
            "class": label,
            "distance": self.distance,
            "sensitivity": self.sensitivity,
            "scale": self.scale,
            "seed": self.seed,
            "degenerate": self.degenerate,
        }


def perturb_flagged_image(image: ImageLike, stats: ClassNoiseStats, config: NoiseConfig, seed: int,
                          sample_id: Optional[str] = None) -> Perturbation:
    """Add Laplace(sensitivity / epsilon) noise to a flagged image and clip to [0, 1].

    Zero sensitivity (image equals the class mean, or degenerate class) leaves
    the image untouched.
    """
    pixels = _pixels(image)
    if sample_id is None and isinstance(image, ImageSample):
        sample_id = image.sample_id
    degenerate = stats.is_degenerate(config.sensitivity_floor)
    if sample_id is not None and sample_id in stats.per_image_distance:
        distance = stats.per_image_distance[sample_id]
    else:
        distance = image_distance(pixels, stats.mean_image, stats.squared)
    sensitivity = normalized_sensitivity(pixels, stats, config.sensitivity_floor, sample_id)
    if sensitivity == 0.0:
        if degenerate:
            logger.warning(f"{sample_id}: degenerate class {stats.label}, no calibrated noise")
        return Perturbation(pixels=pixels, noise=None, distance=distance, sensitivity=0.0,
                            scale=0.0, seed=seed, degenerate=degenerate)

    scale = sensitivity / config.epsilon
    noise = sample_laplace_noise(scale, tuple(pixels.shape), seed, dtype=pixels.dtype)
    out = pixels + noise
    if config.clip:
        out = out.clamp(0.0, 1.0)
    logger.debug(f"{sample_id}: class={stats.label} dist={distance:.4f} "
                 f"sens={sensitivity:.4f} scale={scale:.2f} seed={seed}")
    return Perturbation(pixels=out, noise=noise, distance=distance, sensitivity=sensitivity,
                        scale=scale, seed=seed)


def render_noise_grid(images: Sequence[ImageSample], stats: ClassNoiseStats,
                      epsilons: Sequence[float], seed: int, path: str | os.PathLike) -> None:
    """One row per image: the original, then the image perturbed at each epsilon."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not images or not epsilons:
        raise NoiseError("render_noise_grid needs at least one image and one epsilon")
    cols = 1 + len(epsilons)
    fig, axes = plt.subplots(len(images), cols, figsize=(1.8 * cols, 1.9 * len(images)), squeeze=False)
    for r, sample in enumerate(images):
        panels = [("original", sample.pixels)]
        for eps in epsilons:
            pert = perturb_flagged_image(sample, stats, NoiseConfig(epsilon=eps), seed)
            panels.append((f"eps={eps:g}", pert.pixels))
        for c, (title, px) in enumerate(panels):
            ax = axes[r][c]
            ax.imshow(px.permute(1, 2, 0).clamp(0, 1).numpy())
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=8)
        axes[r][0].set_ylabel(sample.sample_id.rsplit("/", 1)[-1], fontsize=7)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    logger.info(f"Noise grid written to {path}")
