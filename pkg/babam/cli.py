from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .adapters.class_detector import WholeClassDetector
from .adapters.image_folder import ImageFolderSource, save_image_directory
from .adapters.oracle_detector import OracleDetector
from .adapters.pirm_detector import PirmDetector
from .attacks.hidden_trigger import poison_class_fraction, save_poison_manifest
from .attacks.patch import save_patch
from .config import PROFILES, SWEEP_AXES, ExperimentConfig, ModelConfig, PirmConfig, load_config
from .core.dataset import Dataset, mark_poisoned, split
from .core.detector import PoisonDetector
from .core.errors import BabamError, ConfigValidationError, DataError
from .core.types import PoisonPlan, ScenarioMode
from .defenses.noisecal import NoiseConfig, compute_class_stats, render_noise_grid
from .defenses.pirm import build_pirm_corpus, load_pirm, save_pirm, train_pirm
from .engines.defense_loop import filter_training_set
from .engines.evaluation import evaluate_model
from .engines.experiment import effective_noise, fit_model, prepare_data, resolve_detector, run_cycle
from .engines.reporting import emit_report, plot_history
from .engines.sweep import sweep
from .models.checkpoint import load_checkpoint, save_checkpoint
from .utils import derive_seed, dump_json, resolve_data_path, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

LOCK_FILE = ".babam.lock"
PROVENANCE_FILE = "provenance.json"
NOISE_GRID_EPSILONS = (0.5, 0.1, 0.05, 0.01, 0.005)


class OutputLock:
    """Exclusive `<out>/.babam.lock`; one invocation per output directory."""

    def __init__(self, out_dir: Path) -> None:
        self._path = out_dir / LOCK_FILE
        self._fd: Optional[int] = None

    def __enter__(self) -> "OutputLock":
        self._path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self._path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise BabamError(f"{self._path.parent} is locked by another invocation ({self._path})") from None
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            try:
                self._path.unlink()
            except FileNotFoundError:
                pass


# --- configuration helpers ---

def _config(args: argparse.Namespace, required: bool = True) -> ExperimentConfig:
    if args.config:
        return load_config(args.config, profile=args.profile, seed=args.seed)
    if required:
        raise ConfigValidationError(["--config: required for this subcommand"])
    # no file: profile defaults only
    profile = args.profile or "desk"
    if profile not in PROFILES:
        raise ConfigValidationError([f"profile: must be one of {sorted(PROFILES)}"])
    overrides = PROFILES[profile]
    if args.seed is None:
        raise ConfigValidationError(["seed: required (pass --seed or a config file)"])
    return ExperimentConfig(
        seed=args.seed,
        profile=profile,
        model=replace(ModelConfig(), **overrides.get("model", {})),
        pirm=replace(PirmConfig(), **overrides.get("pirm", {})),
    )


def _load_folder(path: str, image_size, out: Path, report_name: str) -> Dataset:
    root = resolve_data_path(path)
    dataset, _ = ImageFolderSource(root, tuple(image_size)).load(out / report_name)
    provenance = root / PROVENANCE_FILE
    if provenance.is_file():
        with open(provenance, "r", encoding="utf-8") as f:
            poisoned = set(json.load(f).get("poisoned", []))
        dataset = mark_poisoned(dataset, poisoned)
        logger.info(f"Ground-truth provenance: {len(poisoned)} poisoned images in {root}")
    return dataset


# --- subcommands ---

def cmd_poison(args: argparse.Namespace, out: Path) -> None:
    config = _config(args)
    data = prepare_data(config, config.seed)
    if args.feature_model:
        extractor, _ = load_checkpoint(args.feature_model)
    else:
        logger.info("No --feature-model given, training a clean feature extractor")
        extractor = fit_model(config, data.train, data.val, config.seed, None)
    plan = config.poison_plan()
    result = poison_class_fraction(data.train, plan, extractor.feature_fn(plan.feature_layer),
                                   derive_seed(config.seed, "poison"), data.patch,
                                   source_pool=data.source_pool, progress=True)
    written = save_image_directory(result.dataset, out / "poisoned_train", modified_ids=result.poison_ids)
    dump_json({"poisoned": sorted(written[pid] for pid in result.poison_ids)},
              out / "poisoned_train" / PROVENANCE_FILE)
    save_poison_manifest(result, plan, out / "poison_manifest.json")
    if data.patch.pixels.numel():
        save_patch(data.patch, out / "patch.png")
    logger.info(f"Poisoned training set: {len(result.dataset)} images ({len(result.records)} poisons)")


def cmd_train(args: argparse.Namespace, out: Path) -> None:
    config = _config(args)
    if args.data:
        dataset = _load_folder(args.data, config.data.image_size, out, "load_report.json")
        train_set, val_set, _ = split(dataset, (0.9, 0.1, 0.0), derive_seed(config.seed, "split"))
    else:
        data = prepare_data(config, config.seed)
        train_set, val_set = data.train, data.val
    model = fit_model(config, train_set, val_set, config.seed, None)
    save_checkpoint(model, out / "model", extra={"kind": "classifier", "train_size": len(train_set)})
    if model.history:
        plot_history(model.history, out / "history.png", x_key="epoch")


def cmd_train_pirm(args: argparse.Namespace, out: Path) -> None:
    config = _config(args, required=False)
    if args.unfrozen_tail is not None:
        config = config.with_section("pirm", unfrozen_tail=args.unfrozen_tail)
    if args.pirm_profile:
        config = config.with_section("pirm", profile=args.pirm_profile)
    corpus_dir = args.corpus or config.data.pirm_corpus
    if not corpus_dir:
        raise ConfigValidationError(["--corpus: required (or set data.pirm_corpus)"])
    spec = config.pirm_spec()
    base = _load_folder(corpus_dir, spec.image_size, out, "load_report.json")
    if len(base.classes) < 2:
        raise DataError(f"PIRM corpus {corpus_dir} needs at least two classes")

    # crafting features come from a classifier trained on the corpus classes
    train_set, val_set, _ = split(base, (0.9, 0.1, 0.0), derive_seed(config.seed, "extractor"))
    extractor = fit_model(replace(config, data=replace(config.data, image_size=spec.image_size)),
                          train_set, val_set, config.seed, None)
    classes = base.classes
    plan = PoisonPlan(
        source_class=classes[0], target_class=classes[1],
        fraction=min(config.poison.fraction, config.poison.max_fraction),
        iterations=config.poison.iterations, step_size=config.poison.step_size,
        delta=config.poison.delta, feature_layer=config.poison.feature_layer,
        max_fraction=config.poison.max_fraction,
    )
    corpus = build_pirm_corpus(base, config.pirm.poison_fraction_of_classes, plan, config.seed,
                               extractor.feature_fn(plan.feature_layer), config.trigger_patch(),
                               max_per_label=config.pirm.max_per_label, progress=True)
    pirm = train_pirm(spec, corpus, config.seed)
    save_pirm(pirm, out / "pirm")
    dump_json({
        "held_out_accuracy": pirm.held_out_accuracy,
        "corpus_size": len(corpus.dataset),
        "poisoned_classes": corpus.poisoned_classes,
        "source_target_overlap": sorted(corpus.overlap()),
        "pirm": spec.to_dict(),
        "history": pirm.model.history,
        "iteration_history": pirm.model.iteration_history,
    }, out / "pirm_report.json")
    if pirm.model.iteration_history:
        plot_history(pirm.model.iteration_history, out / "pirm_first_epoch.png", x_key="step",
                     title="PIRM first epoch")


def _defense_detector(args: argparse.Namespace, config: ExperimentConfig) -> Tuple[PoisonDetector, float]:
    """Detector and default epsilon: a command-line flag wins, else the config's defense section."""
    chosen = [flag for flag, on in (("--pirm", args.pirm), ("--oracle", args.oracle),
                                    ("--complete-class", args.complete_class)) if on]
    if len(chosen) > 1:
        raise ConfigValidationError([f"{' and '.join(chosen)} are mutually exclusive"])
    if args.pirm:
        return PirmDetector(load_pirm(args.pirm)), config.defense.epsilon
    if args.complete_class:
        return WholeClassDetector(args.complete_class), config.defense.complete_epsilon
    if args.oracle:
        return OracleDetector(), config.defense.epsilon
    if not args.config:
        raise ConfigValidationError(["defend: pass --oracle, --pirm or --complete-class, "
                                     "or a --config that sets defense.detector"])
    detector = resolve_detector(config)
    if detector is None:
        raise ConfigValidationError(["defense.detector: 'none' leaves nothing to flag"])
    return detector, effective_noise(config).epsilon


def cmd_defend(args: argparse.Namespace, out: Path) -> None:
    config = _config(args, required=False)
    detector, epsilon = _defense_detector(args, config)
    if args.epsilon is not None:
        epsilon = args.epsilon
    noise = NoiseConfig(epsilon=epsilon, squared_distance=config.defense.squared_distance,
                        sensitivity_floor=config.defense.sensitivity_floor)
    if isinstance(detector, PirmDetector):
        image_size = detector.pirm.image_size
    else:
        image_size = config.data.image_size
    logger.info(f"Defending with the {detector.name} detector at epsilon={epsilon}")
    data_dir = args.data or config.data.root
    if not data_dir:
        raise ConfigValidationError(["--data: required (or set data.root)"])

    untrusted = _load_folder(data_dir, image_size, out, "load_report.json")
    sanitized, manifest = filter_training_set(untrusted, detector, noise, config.seed)
    save_image_directory(sanitized, out / "sanitized", modified_ids=manifest.perturbed_ids)
    provenance = resolve_data_path(data_dir) / PROVENANCE_FILE
    if provenance.is_file():
        shutil.copyfile(provenance, out / "sanitized" / PROVENANCE_FILE)
    dump_json(manifest.to_dict(), out / "defense_manifest.json")

    timings = dict(manifest.timings)
    if not args.no_train:
        t0 = time.perf_counter()
        train_set, val_set, _ = split(sanitized, (0.9, 0.1, 0.0), derive_seed(config.seed, "split"))
        model = fit_model(replace(config, data=replace(config.data, image_size=tuple(image_size))),
                          train_set, val_set, config.seed, None)
        save_checkpoint(model, out / "model", extra={"kind": "classifier", "defended": True,
                                                     "epsilon": epsilon, "detector": detector.name})
        timings["train"] = time.perf_counter() - t0
    # wall-clock varies run to run; kept apart from the deterministic reports
    dump_json(timings, out / "timings.json")


def cmd_evaluate(args: argparse.Namespace, out: Path) -> None:
    config = _config(args)
    problems = []
    if not args.model:
        problems.append("--model: required")
    # binary queries must avoid the source images that were turned into poisons
    if config.scenario.mode == ScenarioMode.BINARY.value and not args.poison_manifest:
        problems.append("--poison-manifest: required in binary mode (its reserved_sources are the queries)")
    if problems:
        raise ConfigValidationError(problems)
    model, _ = load_checkpoint(args.model)
    baseline = load_checkpoint(args.clean_model)[0] if args.clean_model else None
    data = prepare_data(config, config.seed)
    if data.spec.mode == ScenarioMode.BINARY:
        with open(args.poison_manifest, "r", encoding="utf-8") as f:
            reserved = set(json.load(f).get("reserved_sources", []))
        queries = data.source_pool.filter(lambda s: s.sample_id in reserved)
    else:
        queries = data.test.of_class(data.spec.source_class)
    if len(queries) == 0:
        raise DataError("no attacker images available for patched queries")
    report = evaluate_model(model, data.test, queries, data.patch, config.target_label(),
                            trials=config.eval.trials, seed=derive_seed(config.seed, "eval"),
                            label=args.label, config_snapshot=config.to_dict(), baseline_model=baseline)
    emit_report({args.label: report}, out)


def cmd_sweep(args: argparse.Namespace, out: Path) -> None:
    config = _config(args)
    axis = args.axis or config.eval.sweep_axis
    if not axis:
        raise ConfigValidationError(["--axis: required (or set eval.sweep_axis)"])
    values: Optional[List[Any]] = None
    if args.values:
        values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
    result = sweep(axis, config, values=values)
    emit_report(result, out)
    failed = [r.name for r in result.rows if not r.ok]
    if failed:
        logger.warning(f"{len(failed)} sweep row(s) failed: {failed}")


def cmd_reproduce(args: argparse.Namespace, out: Path) -> None:
    config = _config(args)
    cycle = run_cycle(config, progress=True)
    emit_report(cycle.reports, out)
    if cycle.poison is not None:
        save_poison_manifest(cycle.poison, config.poison_plan(), out / "poison_manifest.json")
    if cycle.defense is not None:
        dump_json(cycle.defense.manifest.to_dict(), out / "defense_manifest.json")
        poisons = cycle.poison.dataset.poisoned().samples if cycle.poison else ()
        target = config.target_label()
        members = [s for s in cycle.poison.dataset if s.label == target] if cycle.poison else []
        clean = [s for s in members if not s.is_poisoned][:1]
        if poisons and clean:
            stats = compute_class_stats(members, label=target, squared=config.defense.squared_distance)
            render_noise_grid(clean + [poisons[0]], stats, NOISE_GRID_EPSILONS, config.seed,
                              out / "noise_grid.png")
    dump_json(cycle.timings, out / "timings.json")
    for name, rep in cycle.reports.items():
        logger.info(f"{name:>10}: accuracy={rep.clean_accuracy:.4f} ASR={rep.asr:.4f}+/-{rep.asr_std:.4f} "
                    f"natural={rep.natural_misclassification}")


def _parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        return text


COMMANDS = {
    "poison": cmd_poison,
    "train": cmd_train,
    "train-pirm": cmd_train_pirm,
    "defend": cmd_defend,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "reproduce": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (JSON)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    common.add_argument("--profile", choices=sorted(PROFILES), default=None)
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING ... (default BABAM_LOG_LEVEL)")

    parser = argparse.ArgumentParser(prog="babam", description="Backdoor attack and BA-BAM defense toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poison", parents=[common], help="craft hidden-trigger poisons into the training split")
    p.add_argument("--feature-model", help="checkpoint used as the attacker's feature extractor")

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--data", help="train on this image folder instead of the configured scenario")

    p = sub.add_parser("train-pirm", parents=[common], help="train the poison image recognition model")
    p.add_argument("--corpus", help="image folder the PIRM corpus is crafted from")
    p.add_argument("--unfrozen-tail", type=int, default=None)
    p.add_argument("--pirm-profile", default=None, help="desk, full-blocks or full-layers")

    p = sub.add_parser("defend", parents=[common], help="filter an untrusted image folder and train on it")
    p.add_argument("--data", help="untrusted image folder")
    p.add_argument("--pirm", help="PIRM checkpoint directory")
    p.add_argument("--oracle", action="store_true", help="use ground-truth provenance flags")
    p.add_argument("--complete-class", action="append", default=None,
                   help="perturb every image of this class (repeatable)")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--no-train", action="store_true", help="only write the sanitized set")

    p = sub.add_parser("evaluate", parents=[common], help="accuracy and ASR of a checkpoint")
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--clean-model", help="clean checkpoint for the natural-misclassification baseline")
    p.add_argument("--poison-manifest", help="poison manifest; binary-mode queries are its reserved attacker images")
    p.add_argument("--label", default="model")

    p = sub.add_parser("sweep", parents=[common], help="one train+evaluate cycle per axis value")
    p.add_argument("--axis", choices=list(SWEEP_AXES), default=None)
    p.add_argument("--values", default=None, help="comma-separated axis values")

    sub.add_parser("reproduce", parents=[common], help="desk-scale protocol: clean, undefended, defended")
    return parser


def _write_error(out: Path, error: BaseException) -> None:
    record = {
        "error": type(error).__name__,
        "message": str(error),
        "violations": list(getattr(error, "violations", [])),
    }
    try:
        dump_json(record, out / "error.json")
    except OSError:
        logger.error(f"could not write error record to {out}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    out = Path(args.out)
    try:
        with OutputLock(out):
            COMMANDS[args.command](args, out)
    except ConfigValidationError as e:
        for v in e.violations:
            logger.error(f"config: {v}")
        _write_error(out, e)
        return EXIT_CONFIG
    except (BabamError, OSError, RuntimeError, ValueError) as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        _write_error(out, e)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"{args.command} crashed: {type(e).__name__}: {e}")
        _write_error(out, e)
        return EXIT_RUNTIME
    logger.info(f"{args.command} finished, artifacts in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
