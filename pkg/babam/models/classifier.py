from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
from torch import nn

from ..core.errors import ModelError
from ..core.types import ImageSample
from ..utils import resolve_device
from .registry import build_backbone, trainable_layers
from .spec import FreezeMode, LossKind, ModelSpec

logger = logging.getLogger(__name__)

FEATURES_LAYER = "features"
LOGITS_LAYER = "logits"


class Classifier(nn.Module):
    """Backbone stages -> flatten ("features") -> dense head -> logits."""

    def __init__(self, backbone: nn.Sequential, head: nn.Sequential) -> None:
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(torch.flatten(self.backbone(x), 1))

    def layer_ids(self) -> List[str]:
        return ([n for n, _ in self.backbone.named_children()] + [FEATURES_LAYER]
                + [n for n, _ in self.head.named_children()])

    def forward_to(self, x: torch.Tensor, layer_id: str) -> torch.Tensor:
        """Activations at `layer_id`, flattened to (N, D)."""
        for name, stage in self.backbone.named_children():
            x = stage(x)
            if name == layer_id:
                return torch.flatten(x, 1)
        x = torch.flatten(x, 1)
        if layer_id == FEATURES_LAYER:
            return x
        for name, stage in self.head.named_children():
            x = stage(x)
            if name == layer_id:
                return x
        raise ModelError(f"unknown layer {layer_id!r}; available: {self.layer_ids()}")


def _build_head(in_features: int, spec: ModelSpec) -> nn.Sequential:
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    width_in = in_features
    for i, width in enumerate(spec.head_widths, start=1):
        layers[f"fc{i}"] = nn.Linear(width_in, width)
        layers[f"relu{i}"] = nn.ReLU()
        layers[f"dropout{i}"] = nn.Dropout(spec.dropout)
        width_in = width
    layers[LOGITS_LAYER] = nn.Linear(width_in, spec.output_dim)
    return nn.Sequential(layers)


def _apply_freeze(backbone: nn.Sequential, spec: ModelSpec) -> List[str]:
    stages = trainable_layers(backbone)
    if spec.freeze_mode == FreezeMode.UNFROZEN:
        frozen: List[str] = []
    elif spec.freeze_mode == FreezeMode.FROZEN:
        frozen = stages
    else:
        k = int(spec.freeze_k or 0)
        if k >= len(stages):
            raise ModelError(f"freeze_k={k} must be less than backbone depth {len(stages)}")
        frozen = stages[:k]
    modules = dict(backbone.named_children())
    for name in frozen:
        for p in modules[name].parameters():
            p.requires_grad_(False)
    return frozen


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


@dataclass
class TrainedModel:
    spec: ModelSpec
    network: Classifier
    class_index: Dict[str, int] = field(default_factory=dict)
    history: List[Dict[str, float]] = field(default_factory=list)
    iteration_history: List[Dict[str, float]] = field(default_factory=list)  # first epoch only
    frozen_layers: List[str] = field(default_factory=list)
    device: torch.device = field(default_factory=lambda: torch.device("cpu"))

    @property
    def trainable_params(self) -> int:
        return count_parameters(self.network, trainable_only=True)

    @property
    def total_params(self) -> int:
        return count_parameters(self.network)

    @property
    def classes(self) -> List[str]:
        return sorted(self.class_index, key=self.class_index.__getitem__)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.network.parameters()).dtype

    def feature_fn(self, layer_id: str = FEATURES_LAYER) -> Callable[[torch.Tensor], torch.Tensor]:
        """Differentiable (N, 3, H, W) -> (N, D) map for poison crafting."""
        if layer_id not in self.network.layer_ids():
            raise ModelError(f"unknown layer {layer_id!r}; available: {self.network.layer_ids()}")
        self.network.eval()

        def fn(x: torch.Tensor) -> torch.Tensor:
            out = self.network.forward_to(x.to(self.device, self.dtype), layer_id)
            return out.to(x.device)

        return fn


def build_classifier(spec: ModelSpec, device: Optional[Union[str, torch.device]] = None,
                     seed: Optional[int] = None) -> TrainedModel:
    """Untrained classifier with the requested freeze pattern."""
    if seed is not None:
        torch.manual_seed(seed)
    backbone = build_backbone(spec.backbone, spec.pretrained)
    with torch.no_grad():
        blank = torch.zeros(1, 3, *spec.image_size)
        try:
            in_features = torch.flatten(backbone.eval()(blank), 1).shape[1]
        except RuntimeError as e:
            raise ModelError(f"backbone {spec.backbone} cannot process {spec.image_size} inputs: {e}") from e
    frozen = _apply_freeze(backbone, spec)
    network = Classifier(backbone, _build_head(in_features, spec))
    dev = device if isinstance(device, torch.device) else resolve_device(device)
    model = TrainedModel(spec=spec, network=network.to(dev), frozen_layers=frozen, device=dev)
    logger.info(f"Built {spec.backbone} ({spec.freeze_mode.value}): "
                f"trainable params={model.trainable_params:,} total={model.total_params:,}")
    return model


ImageInput = Union[torch.Tensor, ImageSample, Sequence[ImageSample]]


def _as_batch(model: TrainedModel, images: ImageInput) -> tuple[torch.Tensor, bool]:
    if isinstance(images, ImageSample):
        x, single = images.pixels.unsqueeze(0), True
    elif isinstance(images, torch.Tensor):
        single = images.ndim == 3
        x = images.unsqueeze(0) if single else images
    else:
        if len(images) == 0:
            raise ModelError("empty batch")
        x, single = torch.stack([s.pixels for s in images]), False
    expected = (3, *model.spec.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ModelError(f"input shape {tuple(x.shape)} does not match model input (N, {expected})")
    return x, single


def logits_to_probs(model: TrainedModel, logits: torch.Tensor) -> torch.Tensor:
    if model.spec.loss == LossKind.BINARY_CROSS_ENTROPY:
        p = torch.sigmoid(logits[:, 0])
        return torch.stack([1.0 - p, p], dim=1)
    return torch.softmax(logits, dim=1)


def predict(model: TrainedModel, images: ImageInput, batch_size: int = 256) -> torch.Tensor:
    """Class probabilities, (C,) for one image or (N, C) for a batch, order preserved."""
    x, single = _as_batch(model, images)
    model.network.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            batch = x[start:start + batch_size].to(model.device, model.dtype)
            chunks.append(logits_to_probs(model, model.network(batch)).float().cpu())
    probs = torch.cat(chunks) if chunks else torch.empty(0, model.spec.num_classes)
    return probs[0] if single else probs


def predict_labels(model: TrainedModel, images: ImageInput) -> List[str]:
    probs = predict(model, images)
    if probs.ndim == 1:
        probs = probs.unsqueeze(0)
    classes = model.classes
    return [classes[i] for i in probs.argmax(dim=1).tolist()]


def feature_extract(model: TrainedModel, image: ImageInput, layer_id: str = FEATURES_LAYER,
                    requires_grad: bool = False) -> torch.Tensor:
    """Inference-mode activations at `layer_id`.

    With requires_grad the result stays attached to the graph of `image`
    (which must then be a tensor with requires_grad set).
    """
    x, single = _as_batch(model, image)
    fn = model.feature_fn(layer_id)
    if requires_grad:
        out = fn(x)
    else:
        with torch.no_grad():
            out = fn(x)
    return out[0] if single else out
