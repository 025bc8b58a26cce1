from __future__ import annotations

import copy
import logging
import math
from typing import Dict, Optional

import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset as TorchDataset
from torchvision import transforms

from ..core.dataset import Dataset
from ..core.errors import TrainingError
from .classifier import TrainedModel, predict
from .spec import AugmentPolicy, LossKind

logger = logging.getLogger(__name__)


class _TensorImages(TorchDataset):
    def __init__(self, x: torch.Tensor, y: torch.Tensor, augment: AugmentPolicy) -> None:
        self._x = x
        self._y = y
        ops = []
        if augment.hflip:
            ops.append(transforms.RandomHorizontalFlip())
        if augment.max_translate > 0:
            ops.append(transforms.RandomAffine(degrees=0, translate=(augment.max_translate, augment.max_translate)))
        self._transform = transforms.Compose(ops) if ops else None

    def __len__(self) -> int:
        return self._x.shape[0]

    def __getitem__(self, idx: int):
        img = self._x[idx]
        if self._transform is not None:
            img = self._transform(img)
        return img, self._y[idx]


def _loss_fn(model: TrainedModel) -> nn.Module:
    if model.spec.loss == LossKind.BINARY_CROSS_ENTROPY:
        return nn.BCEWithLogitsLoss()
    return nn.CrossEntropyLoss()


def _compute_loss(model: TrainedModel, criterion: nn.Module, logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if model.spec.loss == LossKind.BINARY_CROSS_ENTROPY:
        return criterion(logits[:, 0], y.to(logits.dtype))
    return criterion(logits, y)


def _optimizer(model: TrainedModel) -> torch.optim.Optimizer:
    hp = model.spec.hyperparams
    params = [p for p in model.network.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("model has no trainable parameters")
    if hp.optimizer == "adam":
        return torch.optim.Adam(params, lr=hp.learning_rate)
    return torch.optim.SGD(params, lr=hp.learning_rate, momentum=hp.momentum)


def accuracy(model: TrainedModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    x, _ = dataset.tensors()
    pred = predict(model, x).argmax(dim=1)
    y = torch.tensor([model.class_index[s.label] for s in dataset])
    return float((pred == y).float().mean().item())


def train(model: TrainedModel, train_set: Dataset, val_set: Optional[Dataset] = None,
          augment: Optional[AugmentPolicy] = None, seed: int = 0) -> TrainedModel:
    """Train a copy of `model`; the weights with the best validation accuracy are kept.

    Deterministic per seed on CPU (single-process loading, seeded global and
    loader RNGs); GPU kernels may add framework nondeterminism.
    """
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    spec = model.spec
    if len(train_set.class_index) != spec.num_classes:
        raise TrainingError(
            f"training set has {len(train_set.class_index)} classes, model expects {spec.num_classes}"
        )
    if model.class_index and dict(model.class_index) != dict(train_set.class_index):
        raise TrainingError("training set class index differs from the model's")

    torch.manual_seed(seed)
    trained = copy.deepcopy(model)
    trained.class_index = dict(train_set.class_index)
    trained.history = []
    trained.iteration_history = []
    hp = spec.hyperparams
    if hp.epochs == 0:
        logger.info("epochs=0, returning the initialized model")
        return trained

    augment = augment or AugmentPolicy()
    x, y = train_set.tensors()
    loader = DataLoader(
        _TensorImages(x, y, augment),
        batch_size=hp.batch_size,
        shuffle=True,
        num_workers=0,
        generator=torch.Generator().manual_seed(seed),
    )
    criterion = _loss_fn(trained)
    optimizer = _optimizer(trained)
    has_val = val_set is not None and len(val_set) > 0

    stages = dict(trained.network.backbone.named_children())
    best_acc = -1.0
    best_state: Optional[Dict[str, torch.Tensor]] = None
    for epoch in range(1, hp.epochs + 1):
        trained.network.train()
        # frozen stages keep their normalization statistics too
        for name in trained.frozen_layers:
            stages[name].eval()
        total_loss, correct, seen = 0.0, 0, 0
        for step, (xb, yb) in enumerate(loader):
            xb = xb.to(trained.device, trained.dtype)
            yb = yb.to(trained.device)
            optimizer.zero_grad()
            logits = trained.network(xb)
            loss = _compute_loss(trained, criterion, logits, yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            loss.backward()
            optimizer.step()

            with torch.no_grad():
                if spec.loss == LossKind.BINARY_CROSS_ENTROPY:
                    hits = ((logits[:, 0] >= 0).long() == yb).sum().item()
                else:
                    hits = (logits.argmax(dim=1) == yb).sum().item()
            total_loss += loss.item() * xb.shape[0]
            correct += hits
            seen += xb.shape[0]
            if epoch == 1:
                trained.iteration_history.append({
                    "step": step, "loss": loss.item(), "accuracy": hits / xb.shape[0],
                })

        record: Dict[str, float] = {
            "epoch": epoch,
            "loss": total_loss / seen,
            "train_accuracy": correct / seen,
        }
        if has_val:
            record["val_accuracy"] = accuracy(trained, val_set)
        trained.history.append(record)
        logger.info(
            f"Epoch {epoch}/{hp.epochs} loss={record['loss']:.4f} "
            f"train_acc={record['train_accuracy']:.4f}"
            + (f" val_acc={record['val_accuracy']:.4f}" if has_val else "")
        )

        if has_val and not math.isnan(record["val_accuracy"]) and record["val_accuracy"] > best_acc:
            best_acc = record["val_accuracy"]
            best_state = copy.deepcopy(trained.network.state_dict())

    if best_state is not None:
        trained.network.load_state_dict(best_state)
    trained.network.eval()
    return trained

