from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from ..core.errors import ReportError  # noqa: E402
from ..utils import dump_json  # noqa: E402
from .evaluation import EvalReport  # noqa: E402
from .sweep import SweepResult  # noqa: E402

logger = logging.getLogger(__name__)

FORMATS = ("json", "csv", "plot")
Reports = Union[SweepResult, Mapping[str, EvalReport]]


def _safe_name(name: str) -> str:
    return str(name).replace("/", "_").replace(":", "-").replace(" ", "_")


def _write_table(rows: List[Dict[str, Any]], path: Path) -> None:
    pd.DataFrame(rows).to_csv(path, index=False, lineterminator="\n")


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_variants(reports: Mapping[str, EvalReport], path: Path) -> None:
    names = list(reports)
    xs = range(len(names))
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2.5, 3.2))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], [reports[n].clean_accuracy for n in names], width, label="accuracy")
    ax.bar([x + width / 2 for x in xs], [reports[n].asr for n in names], width,
           yerr=[reports[n].asr_std for n in names], label="ASR", capsize=3)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.05)
    ax.legend()
    _save(fig, path)


def _plot_sweep(result: SweepResult, path: Path) -> None:
    ok = [r for r in result.rows if r.ok]
    labels = [str(r.value) for r in ok]
    xs = list(range(len(ok)))
    variants = sorted({v for r in ok for v in r.reports})
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(ok) + 2.0), 3.4))
    for variant in variants:
        acc = [r.reports[variant].clean_accuracy if variant in r.reports else float("nan") for r in ok]
        asr = [r.reports[variant].asr if variant in r.reports else float("nan") for r in ok]
        ax.plot(xs, acc, marker="o", label=f"{variant} accuracy")
        ax.plot(xs, asr, marker="s", linestyle="--", label=f"{variant} ASR")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20)
    ax.set_xlabel(result.axis)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_history(history: Sequence[Mapping[str, float]], path: str | os.PathLike, x_key: str = "step",
                 title: Optional[str] = None) -> Path:
    """Loss and accuracy curves from a training history (per step or per epoch)."""
    if not history:
        raise ReportError("empty training history")
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        xs = [h[x_key] for h in history]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(xs, [h["loss"] for h in history], label="loss")
        acc_key = "accuracy" if "accuracy" in history[0] else "train_accuracy"
        ax.plot(xs, [h[acc_key] for h in history], label="accuracy")
        ax.set_xlabel(x_key)
        if title:
            ax.set_title(title)
        ax.legend()
        _save(fig, out)
    except OSError as e:
        raise ReportError(f"cannot write plot {out}: {e}") from e
    return out


def emit_report(reports: Reports, out_dir: str | os.PathLike,
                formats: Sequence[str] = FORMATS) -> Dict[str, Path]:
    """Write `<out>/<row>/report.json`, `<out>/table.csv` and `<out>/plot.png`.

    Content depends only on the reports, so repeated emission is byte-identical.
    """
    unknown = sorted(set(formats) - set(FORMATS))
    if unknown:
        raise ReportError(f"unknown report formats {unknown}")
    is_sweep = isinstance(reports, SweepResult)
    if (is_sweep and not reports.rows) or (not is_sweep and not reports):
        raise ReportError("nothing to report")

    out = Path(out_dir)
    written: Dict[str, Path] = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        if is_sweep:
            rows = [r.flat() for r in reports.rows]
            if "json" in formats:
                for r in reports.rows:
                    path = out / _safe_name(r.name) / "report.json"
                    dump_json({"axis": r.axis, "value": r.value, "seed": r.seed,
                               "status": "ok" if r.ok else "failed", "error": r.error,
                               "reports": {k: v.to_dict() for k, v in r.reports.items()}}, path)
                    written[f"report:{r.name}"] = path
                dump_json(reports.summary(), out / "summary.json")
                written["summary"] = out / "summary.json"
        else:
            rows = [rep.row() for rep in reports.values()]
            if "json" in formats:
                for name, rep in reports.items():
                    path = out / _safe_name(name) / "report.json"
                    dump_json(rep.to_dict(), path)
                    written[f"report:{name}"] = path
        if "csv" in formats:
            _write_table(rows, out / "table.csv")
            written["table"] = out / "table.csv"
        if "plot" in formats:
            if is_sweep:
                if any(r.ok for r in reports.rows):
                    _plot_sweep(reports, out / "plot.png")
                    written["plot"] = out / "plot.png"
            else:
                _plot_variants(reports, out / "plot.png")
                written["plot"] = out / "plot.png"
    except OSError as e:
        raise ReportError(f"cannot write report to {out}: {e}") from e
    logger.info(f"Report written to {out} ({', '.join(sorted(written))})")
    return written
