from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from PIL import Image, UnidentifiedImageError
from torchvision.transforms import functional as TF

from ..core.dataset import Dataset
from ..core.errors import DataError, ReportError
from ..core.types import ImageSample

logger = logging.getLogger(__name__)


@dataclass
class LoadReport:
    root: str
    image_size: Tuple[int, int]
    loaded: int = 0
    skipped: List[Dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "root": self.root,
            "image_size": list(self.image_size),
            "loaded": self.loaded,
            "skipped": self.skipped,
        }

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def decode_image(path: str | os.PathLike, image_size: Tuple[int, int]) -> torch.Tensor:
    """Decode one file into a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        if rgb.size != (image_size[1], image_size[0]):
            rgb = rgb.resize((image_size[1], image_size[0]), Image.BILINEAR)
        return TF.to_tensor(rgb)


class ImageFolderSource:
    """Directory-structured image source: `<root>/<class_name>/<image files>`.

    Iteration order is lexicographic by relative path, so repeated loads of an
    unchanged directory are bit-identical.
    """

    def __init__(self, root: str | os.PathLike, image_size: Tuple[int, int] = (64, 64),
                 max_workers: int = 4) -> None:
        self._root = Path(root)
        self._image_size = (int(image_size[0]), int(image_size[1]))
        self._max_workers = max_workers

    def _class_dirs(self) -> List[Path]:
        if not self._root.is_dir():
            raise DataError(f"dataset root {self._root} does not exist or is not a directory")
        dirs = sorted(p for p in self._root.iterdir() if p.is_dir() and not p.name.startswith("."))
        if not dirs:
            raise DataError(f"dataset root {self._root} has no class subdirectories")
        return dirs

    def _decode(self, path: Path) -> Tuple[Path, Optional[torch.Tensor], Optional[str]]:
        try:
            return path, decode_image(path, self._image_size), None
        except (UnidentifiedImageError, OSError, ValueError) as e:
            return path, None, str(e)

    def load(self, report_path: str | os.PathLike | None = None) -> Tuple[Dataset, LoadReport]:
        report = LoadReport(root=str(self._root), image_size=self._image_size)
        class_dirs = self._class_dirs()
        files: List[Tuple[str, Path]] = []
        for class_dir in class_dirs:
            members = sorted(p for p in class_dir.iterdir() if p.is_file() and not p.name.startswith("."))
            if not members:
                raise DataError(f"class with zero samples: {class_dir.name}")
            files.extend((class_dir.name, p) for p in members)

        with ThreadPoolExecutor(max_workers=self._max_workers) as pool:
            decoded = list(pool.map(self._decode, (p for _, p in files)))

        samples: List[ImageSample] = []
        per_class: Dict[str, int] = {c.name: 0 for c in class_dirs}
        for (label, path), (_, pixels, err) in zip(files, decoded):
            rel = path.relative_to(self._root).as_posix()
            if pixels is None:
                logger.warning(f"Skipping undecodable file {rel}: {err}")
                report.skipped.append({"path": rel, "reason": err or "unknown"})
                continue
            samples.append(ImageSample(sample_id=rel, pixels=pixels, label=label, source_path=str(path)))
            per_class[label] += 1

        empty = [c for c, n in per_class.items() if n == 0]
        if empty:
            raise DataError(f"class with zero samples: {', '.join(empty)}")

        report.loaded = len(samples)
        if report_path is not None:
            report.write(report_path)
        classes = [c.name for c in class_dirs]
        logger.info(f"Loaded {len(samples)} images in {len(classes)} classes from {self._root}")
        return Dataset.from_samples(samples, classes=classes, name=self._root.name), report


def load_image_directory(root_path: str | os.PathLike, image_size: Tuple[int, int] = (64, 64),
                         report_path: str | os.PathLike | None = None) -> Dataset:
    dataset, _ = ImageFolderSource(root_path, image_size).load(report_path)
    return dataset


def save_tensor_image(pixels: torch.Tensor, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    TF.to_pil_image(pixels.clamp(0.0, 1.0)).save(path, format="PNG")


def _relative_target(sample: ImageSample, encode: bool) -> str:
    parts = sample.sample_id.split("/")
    if len(parts) == 2 and parts[0] == sample.label:
        name = parts[1]
    else:
        name = "__".join(parts)
    if encode and Path(name).suffix.lower() != ".png":
        # x.jpg -> x.jpg.png
        name = f"{name}.png"
    return f"{sample.label}/{name}"


def save_image_directory(dataset: Dataset, root: str | os.PathLike,
                         modified_ids: Optional[Sequence[str]] = None) -> Dict[str, str]:
    """Write a dataset as an image folder; returns sample id -> written relative path.

    Samples outside `modified_ids` that were loaded from disk are copied
    byte-for-byte from their source file; everything else is encoded as PNG.
    """
    out = Path(root)
    modified = set(modified_ids) if modified_ids is not None else {s.sample_id for s in dataset}
    written: Dict[str, str] = {}
    taken: Dict[str, str] = {}
    try:
        for c in dataset.classes:
            (out / c).mkdir(parents=True, exist_ok=True)
        for s in dataset:
            copy = s.sample_id not in modified and bool(s.source_path) and os.path.exists(s.source_path)
            rel = _relative_target(s, encode=not copy)
            if rel in taken:
                raise DataError(f"{s.sample_id} and {taken[rel]} would both be written to {rel}")
            taken[rel] = s.sample_id
            if copy:
                shutil.copyfile(s.source_path, out / rel)
            else:
                save_tensor_image(s.pixels, out / rel)
            written[s.sample_id] = rel
    except OSError as e:
        raise ReportError(f"cannot write image folder {out}: {e}") from e
    logger.info(f"Wrote {len(written)} images to {out}")
    return written
