from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch

from ..core.errors import ModelError, ReportError
from ..utils import dump_json
from .classifier import TrainedModel, build_classifier
from .spec import ModelSpec

logger = logging.getLogger(__name__)

WEIGHTS_FILE = "weights.pt"
METADATA_FILE = "metadata.json"


def save_checkpoint(model: TrainedModel, directory: str | os.PathLike,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Weight blob plus a JSON sidecar (spec, class index, history, extra fields)."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        torch.save(model.network.state_dict(), out / WEIGHTS_FILE)
    except OSError as e:
        raise ReportError(f"cannot write checkpoint to {out}: {e}") from e
    dump_json({
        "spec": model.spec.to_dict(),
        "class_index": model.class_index,
        "history": model.history,
        "iteration_history": model.iteration_history,
        "frozen_layers": model.frozen_layers,
        "trainable_params": model.trainable_params,
        "total_params": model.total_params,
        "extra": extra or {},
    }, out / METADATA_FILE)
    logger.info(f"Checkpoint saved to {out}")
    return out


def load_checkpoint(directory: str | os.PathLike,
                    device: Optional[str] = None) -> Tuple[TrainedModel, Dict[str, Any]]:
    src = Path(directory)
    meta_path, weights_path = src / METADATA_FILE, src / WEIGHTS_FILE
    if not meta_path.exists() or not weights_path.exists():
        raise ModelError(f"{src} is not a checkpoint directory ({METADATA_FILE} + {WEIGHTS_FILE})")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    spec = ModelSpec.from_dict(meta["spec"])
    # pretrained weights are overwritten by the state dict anyway
    model = build_classifier(spec.with_changes(pretrained=False), device=device)
    state = torch.load(weights_path, map_location=model.device)
    model.network.load_state_dict(state)
    model.network.eval()
    model.spec = spec
    model.class_index = {k: int(v) for k, v in meta["class_index"].items()}
    model.history = list(meta.get("history", []))
    model.iteration_history = list(meta.get("iteration_history", []))
    return model, dict(meta.get("extra", {}))
