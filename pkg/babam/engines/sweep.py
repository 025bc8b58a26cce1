from __future__ import annotations

import logging
import traceback
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from ..config import DEFAULT_SWEEP_VALUES, SWEEP_AXES, ExperimentConfig
from ..core.dataset import Dataset
from ..core.errors import ConfigValidationError
from ..models.registry import available_backbones
from ..models.spec import FreezeMode
from ..utils import derive_seed
from .defense_loop import DetectorLike
from .evaluation import EvalReport
from .experiment import run_cycle

logger = logging.getLogger(__name__)

# which models each axis studies
AXIS_VARIANTS: Dict[str, Sequence[str]] = {
    "poison_fraction": ("undefended",),
    "epsilon": ("clean", "defended"),
    "architecture": ("clean", "undefended"),
    "perturbation_mode": ("defended",),
}
# variant whose ASR is the row's headline
AXIS_HEADLINE: Dict[str, str] = {
    "poison_fraction": "undefended",
    "epsilon": "defended",
    "architecture": "undefended",
    "perturbation_mode": "defended",
}


def parse_architecture(value: str) -> Dict[str, Any]:
    """`backbone:freeze_mode[:k]`, e.g. `alexnet:frozen` or `vgg16:freeze_first_k:10`."""
    parts = str(value).split(":")
    if parts[0] not in available_backbones():
        raise ConfigValidationError([f"architecture {value!r}: unknown backbone {parts[0]!r}"])
    mode = parts[1] if len(parts) > 1 else FreezeMode.UNFROZEN.value
    if mode not in {m.value for m in FreezeMode}:
        raise ConfigValidationError([f"architecture {value!r}: unknown freeze mode {mode!r}"])
    changes: Dict[str, Any] = {"backbone": parts[0], "freeze_mode": mode, "freeze_k": None}
    if mode == FreezeMode.FREEZE_FIRST_K.value:
        if len(parts) != 3 or not parts[2].isdigit():
            raise ConfigValidationError([f"architecture {value!r}: freeze_first_k needs a K"])
        changes["freeze_k"] = int(parts[2])
    return changes


def apply_axis(config: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    if axis == "poison_fraction":
        fraction = float(value)
        return config.with_section("poison", fraction=fraction,
                                   max_fraction=max(config.poison.max_fraction, fraction))
    if axis == "epsilon":
        return config.with_section("defense", epsilon=float(value), perturbation_mode="selective")
    if axis == "architecture":
        return config.with_section("model", **parse_architecture(value))
    if axis == "perturbation_mode":
        if value not in ("complete", "selective"):
            raise ConfigValidationError([f"perturbation_mode: unknown value {value!r}"])
        return config.with_section("defense", perturbation_mode=value)
    raise ConfigValidationError([f"sweep axis {axis!r} not in {list(SWEEP_AXES)}"])


@dataclass
class SweepRow:
    axis: str
    value: Any
    seed: int
    reports: Dict[str, EvalReport] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def name(self) -> str:
        return f"{self.axis}={self.value}".replace("/", "_").replace(":", "-")

    def flat(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"axis": self.axis, "value": self.value, "seed": self.seed,
                               "status": "ok" if self.ok else "failed", "error": self.error or ""}
        for variant, rep in self.reports.items():
            out[f"{variant}_accuracy"] = rep.clean_accuracy
            out[f"{variant}_asr"] = rep.asr
            out[f"{variant}_asr_std"] = rep.asr_std
        return out


@dataclass
class SweepResult:
    axis: str
    rows: List[SweepRow] = field(default_factory=list)

    def headline(self, row: SweepRow) -> Optional[EvalReport]:
        return row.reports.get(AXIS_HEADLINE[self.axis])

    def most_vulnerable(self) -> Optional[SweepRow]:
        ok = [r for r in self.rows if r.ok and self.headline(r) is not None]
        if not ok:
            return None
        # first row wins ties
        return max(ok, key=lambda r: self.headline(r).asr)

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "axis": self.axis,
            "rows": len(self.rows),
            "failed": [r.name for r in self.rows if not r.ok],
        }
        if self.axis == "architecture":
            worst = self.most_vulnerable()
            out["most_vulnerable"] = None if worst is None else {
                "value": worst.value,
                "asr": self.headline(worst).asr,
                "clean_accuracy": self.headline(worst).clean_accuracy,
            }
        return out


def sweep(axis: str, base_config: ExperimentConfig, seed: Optional[int] = None,
          values: Optional[Sequence[Any]] = None, dataset: Optional[Dataset] = None,
          detector: Optional[DetectorLike] = None, device: Optional[str] = None) -> SweepResult:
    """One full train + evaluate cycle per axis value.

    Each row runs under its own seed derived from (seed, axis, value), so rows
    are independent of order. A failing row is recorded and the sweep goes on.
    """
    if axis not in SWEEP_AXES:
        raise ConfigValidationError([f"sweep axis {axis!r} not in {list(SWEEP_AXES)}"])
    seed = base_config.seed if seed is None else seed
    if values is None:
        values = base_config.eval.sweep_values or DEFAULT_SWEEP_VALUES[axis]
    result = SweepResult(axis=axis)
    for value in values:
        row = SweepRow(axis=axis, value=value, seed=derive_seed(seed, axis, value))
        logger.info(f"Sweep {axis}={value} (seed {row.seed})")
        try:
            config = apply_axis(base_config, axis, value)
            cycle = run_cycle(config, seed=row.seed, dataset=dataset, variants=AXIS_VARIANTS[axis],
                              detector=detector, device=device)
            row.reports = cycle.reports
        except Exception as e:
            row.error = f"{type(e).__name__}: {e}"
            logger.error(f"Sweep row {axis}={value} failed: {row.error}")
            logger.debug(traceback.format_exc())
        result.rows.append(row)
    return result
