from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from ..core.dataset import Dataset
from ..core.errors import CraftError
from ..core.types import ImageSample, PoisonPlan, PoisonRecord, TriggerPatch
from ..utils import dump_json
from .patch import place_patch

logger = logging.getLogger(__name__)

# (N, 3, H, W) -> (N, D), differentiable with respect to its input
FeatureFn = Callable[[torch.Tensor], torch.Tensor]


def _collision_loss(feature_fn: FeatureFn, z: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
    feats = feature_fn(z.unsqueeze(0)).flatten(1)
    return ((feats - anchor) ** 2).sum()


def _finite(value: float, what: str, target_id: str) -> float:
    if not math.isfinite(value):
        raise CraftError(f"non-finite {what} while crafting poison for target {target_id}")
    return value


def craft_hidden_poison(target: ImageSample, patched_source: torch.Tensor, feature_fn: FeatureFn,
                        plan: PoisonPlan, source_id: str = "") -> PoisonRecord:
    """Feature-collision poison: look like `target` in pixels, like `patched_source` in features.

    Projected gradient descent on ||f(z) - f(s~)||^2 from z = target, projecting
    into the L-inf ball of radius plan.delta around the target and into [0, 1]
    after every step. A step that raises the loss is retried at half the size,
    so the loss trace never increases.
    """
    t = target.pixels.detach()
    s = patched_source.detach().to(t.dtype)
    if s.shape != t.shape:
        raise CraftError(f"patched source {tuple(s.shape)} and target {tuple(t.shape)} differ in shape")

    with torch.no_grad():
        anchor = feature_fn(s.unsqueeze(0)).flatten(1).detach()
        loss = _finite(_collision_loss(feature_fn, t, anchor).item(), "loss", target.sample_id)

    record = PoisonRecord(
        poisoned_pixels=t.clone(),
        clean_label=target.label,
        source_id=source_id,
        target_id=target.sample_id,
        final_loss=loss,
        initial_loss=loss,
        iterations_used=0,
        delta=plan.delta,
        loss_trace=[loss],
    )
    if plan.delta == 0:
        logger.warning(f"delta is 0, poison for {target.sample_id} is the unchanged target (degenerate)")
        return record

    lower = (t - plan.delta).clamp(0.0, 1.0)
    upper = (t + plan.delta).clamp(0.0, 1.0)
    z = t.clone()
    for _ in range(plan.iterations):
        z_var = z.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(_collision_loss(feature_fn, z_var, anchor), z_var)
        if not torch.isfinite(grad).all():
            raise CraftError(f"non-finite gradient while crafting poison for target {target.sample_id}")
        if plan.normalize_step:
            scale = grad.abs().max()
            if scale == 0:
                break
            grad = grad / scale

        step = plan.step_size
        accepted: Optional[Tuple[torch.Tensor, float]] = None
        for _ in range(plan.max_backtracks + 1):
            candidate = torch.maximum(torch.minimum(z - step * grad, upper), lower)
            with torch.no_grad():
                cand_loss = _finite(_collision_loss(feature_fn, candidate, anchor).item(), "loss",
                                    target.sample_id)
            if cand_loss <= loss:
                accepted = (candidate, cand_loss)
                break
            step /= 2.0
        if accepted is None:
            logger.debug(f"Backtracking exhausted for {target.sample_id}, stopping early")
            break
        z, loss = accepted
        record.loss_trace.append(loss)
        record.iterations_used += 1
        if loss == 0.0:
            break

    record.poisoned_pixels = z.detach()
    record.final_loss = loss
    return record


@dataclass
class PoisonResult:
    dataset: Dataset  # input dataset plus the injected poisons
    records: List[PoisonRecord]
    reserved_sources: Dataset  # unpoisoned attacker images kept for test-time queries
    poison_ids: List[str]

    def manifest(self) -> List[dict]:
        rows = []
        for pid, rec in zip(self.poison_ids, self.records):
            row = rec.to_manifest()
            row["poison_id"] = pid
            rows.append(row)
        return rows


def poison_class_fraction(dataset: Dataset, plan: PoisonPlan, feature_fn: FeatureFn, seed: int,
                          patch: TriggerPatch, source_pool: Optional[Dataset] = None,
                          progress: bool = False) -> PoisonResult:
    """Craft floor(fraction * |source|) hidden poisons and inject them with the target label.

    Source images come from `source_pool` when given (binary scenarios keep the
    attacker outside the training classes), otherwise from `dataset` itself.
    """
    pool = source_pool if source_pool is not None else dataset
    sources = [s for s in pool if s.label == plan.source_class and not s.is_poisoned]
    if plan.target_class not in dataset.class_index:
        raise CraftError(f"target class {plan.target_class!r} not in {dataset.name}")
    targets = [s for s in dataset if s.label == plan.target_class and not s.is_poisoned]
    if not sources:
        raise CraftError(f"source class {plan.source_class!r} has no images")
    if not targets:
        raise CraftError(f"target class {plan.target_class!r} has no images")

    count = int(math.floor(plan.fraction * len(sources)))
    if count == 0:
        raise CraftError(f"fraction {plan.fraction} of {len(sources)} source images yields zero poisons")
    if count >= len(sources):
        raise CraftError("no unpoisoned source images remain for test-time queries")

    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(sources), size=count, replace=False))
    paired = rng.choice(len(targets), size=count, replace=len(targets) < count)

    records: List[PoisonRecord] = []
    injected: List[ImageSample] = []
    poison_ids: List[str] = []
    pairs = list(zip(chosen.tolist(), paired.tolist()))
    logger.info(f"Crafting {count} poisons: {plan.source_class} -> {plan.target_class} "
                f"(delta={plan.delta:.4f}, iterations={plan.iterations})")
    for k, (si, ti) in enumerate(tqdm(pairs, desc="crafting", disable=not progress)):
        source, target = sources[si], targets[ti]
        patched, position = place_patch(source, patch, rng)
        rec = craft_hidden_poison(target, patched, feature_fn, plan, source_id=source.sample_id)
        rec.patch_position = position
        poison_id = f"poison/{k:04d}/{source.sample_id}"
        injected.append(ImageSample(
            sample_id=poison_id,
            pixels=rec.poisoned_pixels.clamp(0.0, 1.0),
            label=plan.target_class,
            is_poisoned=True,
        ))
        records.append(rec)
        poison_ids.append(poison_id)
        logger.debug(f"{poison_id}: loss {rec.initial_loss:.4f} -> {rec.final_loss:.4f}")

    chosen_set = set(chosen.tolist())
    reserved = [s for i, s in enumerate(sources) if i not in chosen_set]
    reserved_ds = Dataset.from_samples(reserved, classes=[plan.source_class], name=f"{pool.name}:reserved")
    return PoisonResult(
        dataset=dataset.extend(injected),
        records=records,
        reserved_sources=reserved_ds,
        poison_ids=poison_ids,
    )


def save_poison_manifest(result: PoisonResult, plan: PoisonPlan, path: str | os.PathLike) -> None:
    dump_json({
        "source_class": plan.source_class,
        "target_class": plan.target_class,
        "fraction": plan.fraction,
        "delta": plan.delta,
        "iterations": plan.iterations,
        "feature_layer": plan.feature_layer,
        "poisons": result.manifest(),
        "reserved_sources": result.reserved_sources.ids,
    }, path)
