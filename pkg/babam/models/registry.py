from __future__ import annotations

import logging
from collections import OrderedDict
from typing import Callable, Dict, List

import torch
from torch import nn
from torchvision import models as tvm

from ..core.errors import ModelError

logger = logging.getLogger(__name__)

# builder(pretrained) -> nn.Sequential of named stages
BackboneBuilder = Callable[[bool], nn.Sequential]

_REGISTRY: Dict[str, BackboneBuilder] = {}


def register_backbone(name: str) -> Callable[[BackboneBuilder], BackboneBuilder]:
    def wrap(fn: BackboneBuilder) -> BackboneBuilder:
        _REGISTRY[name] = fn
        return fn
    return wrap


def available_backbones() -> List[str]:
    return sorted(_REGISTRY)


def build_backbone(name: str, pretrained: bool = False) -> nn.Sequential:
    try:
        builder = _REGISTRY[name]
    except KeyError:
        raise ModelError(f"unknown backbone {name!r}; registered: {available_backbones()}") from None
    return builder(pretrained)


def trainable_layers(backbone: nn.Sequential) -> List[str]:
    """Names of the top-level stages that own parameters, in forward order."""
    return [name for name, module in backbone.named_children()
            if any(True for _ in module.parameters())]


class ImageNetNormalize(nn.Module):
    """Maps [0, 1] pixels to the statistics ImageNet weights were trained on."""

    def __init__(self) -> None:
        super().__init__()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


@register_backbone("desk-convnet")
def desk_convnet(pretrained: bool = False) -> nn.Sequential:
    if pretrained:
        logger.warning("desk-convnet has no pretrained weights, using random init")
    return nn.Sequential(OrderedDict([
        ("block1", _conv_block(3, 32)),
        ("block2", _conv_block(32, 64)),
        ("block3", _conv_block(64, 128)),
        ("block4", _conv_block(128, 256)),
    ]))


def _tv_stages(stages: "OrderedDict[str, nn.Module]", pretrained: bool) -> nn.Sequential:
    # same stage layout with or without weights, so checkpoints load either way
    stages = OrderedDict([("normalize", ImageNetNormalize()), *stages.items()])
    stages["pool"] = nn.AdaptiveAvgPool2d((1, 1))
    return nn.Sequential(stages)


def _named(seq: nn.Sequential, prefix: str) -> "OrderedDict[str, nn.Module]":
    return OrderedDict((f"{prefix}{name}", module) for name, module in seq.named_children())


@register_backbone("alexnet")
def alexnet(pretrained: bool = False) -> nn.Sequential:
    net = tvm.alexnet(weights="DEFAULT" if pretrained else None)
    return _tv_stages(_named(net.features, "features_"), pretrained)


@register_backbone("vgg11")
def vgg11(pretrained: bool = False) -> nn.Sequential:
    net = tvm.vgg11(weights="DEFAULT" if pretrained else None)
    return _tv_stages(_named(net.features, "features_"), pretrained)


@register_backbone("vgg16")
def vgg16(pretrained: bool = False) -> nn.Sequential:
    net = tvm.vgg16(weights="DEFAULT" if pretrained else None)
    return _tv_stages(_named(net.features, "features_"), pretrained)


@register_backbone("resnet18")
def resnet18(pretrained: bool = False) -> nn.Sequential:
    net = tvm.resnet18(weights="DEFAULT" if pretrained else None)
    names = ["conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"]
    return _tv_stages(OrderedDict((n, getattr(net, n)) for n in names), pretrained)


@register_backbone("inception_v3")
def inception_v3(pretrained: bool = False) -> nn.Sequential:
    # needs inputs of at least 75x75
    if pretrained:
        net = tvm.inception_v3(weights="DEFAULT")
    else:
        net = tvm.inception_v3(weights=None, aux_logits=False, init_weights=False)
    names = [
        "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1",
        "Conv2d_3b_1x1", "Conv2d_4a_3x3", "maxpool2",
        "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e",
        "Mixed_7a", "Mixed_7b", "Mixed_7c",
    ]
    return _tv_stages(OrderedDict((n, getattr(net, n)) for n in names), pretrained)


def backbone_depth(name: str) -> int:
    """Number of parameterised stages; freeze-first-K needs K below this."""
    return len(trainable_layers(build_backbone(name, pretrained=False)))
