from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
from PIL import Image
from torchvision.transforms import functional as TF

from ..core.errors import CraftError
from ..core.types import AnchorPolicy, ImageSample, TriggerPatch

logger = logging.getLogger(__name__)

RngLike = Union[int, np.random.Generator]


def _pixels(image: Union[ImageSample, torch.Tensor]) -> torch.Tensor:
    return image.pixels if isinstance(image, ImageSample) else image


def apply_patch(image: Union[ImageSample, torch.Tensor], patch: TriggerPatch,
                position: Tuple[int, int]) -> torch.Tensor:
    """Return a copy of the image with the patch rectangle pasted at (row, col)."""
    pixels = _pixels(image)
    _, height, width = pixels.shape
    p_h, p_w = patch.size
    row, col = int(position[0]), int(position[1])
    if row < 0 or col < 0 or row + p_h > height or col + p_w > width:
        raise CraftError(
            f"patch {p_h}x{p_w} at ({row}, {col}) does not fit a {height}x{width} image"
        )
    out = pixels.clone()
    if p_h and p_w:
        out[:, row:row + p_h, col:col + p_w] = patch.pixels.to(out.dtype)
    return out


def random_patch_position(image_dims: Tuple[int, int], patch_dims: Tuple[int, int],
                          rng_seed: RngLike) -> Tuple[int, int]:
    """Uniform draw over every valid top-left anchor."""
    height, width = int(image_dims[0]), int(image_dims[1])
    p_h, p_w = int(patch_dims[0]), int(patch_dims[1])
    if p_h > height or p_w > width:
        raise CraftError(f"patch {p_h}x{p_w} larger than image {height}x{width}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    row = int(rng.integers(0, height - p_h + 1))
    col = int(rng.integers(0, width - p_w + 1))
    return row, col


def place_patch(image: Union[ImageSample, torch.Tensor], patch: TriggerPatch,
                rng: RngLike) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Apply the patch following its anchor policy; returns the pixels and the position used."""
    pixels = _pixels(image)
    if patch.anchor == AnchorPolicy.FIXED:
        position = patch.position
    else:
        position = random_patch_position(tuple(pixels.shape[1:]), patch.size, rng)
    return apply_patch(pixels, patch, position), position


def save_patch(patch: TriggerPatch, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if patch.pixels.numel() == 0:
        raise CraftError("cannot persist an empty patch")
    TF.to_pil_image(patch.pixels).save(path, format="PNG")
    logger.info(f"Trigger patch saved to {path}")


def load_patch(path: str | os.PathLike, anchor: AnchorPolicy = AnchorPolicy.RANDOM,
               position: Tuple[int, int] | None = None) -> TriggerPatch:
    with Image.open(path) as img:
        pixels = TF.to_tensor(img.convert("RGB"))
    return TriggerPatch(pixels=pixels, anchor=anchor, position=position)
