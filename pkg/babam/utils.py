from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import sys
from pathlib import Path
from typing import Any

import numpy as np
import torch

try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass


def setup_logging(level: int | str | None = None) -> None:
    """Setup logging with filename and line number format.

    Format includes:
    - Timestamp
    - Filename and line number
    - Level
    - Message
    """
    if level is None:
        level = os.getenv("BABAM_LOG_LEVEL", "INFO")
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
    logging.basicConfig(
        level=level,
        format='%(asctime)s -[%(filename)s:%(lineno)d] - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stdout,
        force=True,
    )


def get_logger(name: str) -> logging.Logger:
    """Get a logger with the given name."""
    return logging.getLogger(name)


def derive_seed(seed: int, *keys: Any) -> int:
    """Stable 63-bit seed for (seed, keys), independent of call order and process."""
    text = ":".join([str(seed), *map(str, keys)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def resolve_device(name: str | None = None) -> torch.device:
    """Device from argument, BABAM_DEVICE, or CPU."""
    name = name or os.getenv("BABAM_DEVICE") or "cpu"
    if name.startswith("cuda") and not torch.cuda.is_available():
        logging.getLogger(__name__).warning(f"{name} requested but CUDA is unavailable, using cpu")
        return torch.device("cpu")
    return torch.device(name)


def data_root() -> Path | None:
    root = os.getenv("BABAM_DATA_ROOT")
    return Path(root) if root else None


def resolve_data_path(path: str | os.PathLike) -> Path:
    """Relative dataset paths are taken against BABAM_DATA_ROOT when it is set."""
    p = Path(path)
    base = data_root()
    if not p.is_absolute() and base is not None:
        return base / p
    return p


def dump_json(obj: Any, path: str | os.PathLike) -> None:
    """Deterministic JSON: sorted keys, fixed indent, trailing newline."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (set, frozenset, tuple)):
        return list(value)
    if hasattr(value, "value"):  # enums
        return value.value
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
