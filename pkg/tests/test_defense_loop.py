from __future__ import annotations

from typing import List, Sequence

import pytest
import torch

from babam.adapters.class_detector import WholeClassDetector
from babam.adapters.oracle_detector import OracleDetector
from babam.core.dataset import Dataset, mark_poisoned
from babam.core.detector import PoisonDetector
from babam.core.errors import ModelError
from babam.core.types import ImageSample, PoisonVerdict
from babam.defenses.noisecal import NoiseConfig, compute_class_stats
from babam.engines.defense_loop import DefenseFilter, filter_training_set, run_babam
from babam.models.spec import AugmentPolicy

from conftest import make_dataset, make_sample, tiny_spec


class ShortDetector(PoisonDetector):
    name = "short"

    def classify(self, samples: Sequence[ImageSample]) -> List[PoisonVerdict]:
        return [PoisonVerdict(flag=0, confidence=0.0)] * (len(samples) - 1)


def _untrusted():
    ds = make_dataset({"A": 6, "B": 6}, noise=0.4, seed=1)
    return mark_poisoned(ds, {"A/001.png", "A/004.png", "B/002.png"})


def test_clean_set_passes_through_unchanged():
    ds = make_dataset({"A": 5, "B": 5}, noise=0.4)
    out, manifest = filter_training_set(ds, OracleDetector(), NoiseConfig(epsilon=0.1), seed=0)
    assert out.ids == ds.ids
    assert all(torch.equal(a.pixels, b.pixels) for a, b in zip(out, ds))
    assert manifest.flagged_ids == [] and manifest.perturbed_ids == []


def test_only_flagged_images_change():
    ds = _untrusted()
    out, manifest = filter_training_set(ds, OracleDetector(), NoiseConfig(epsilon=0.1), seed=0)
    assert len(out) == len(ds) and out.ids == ds.ids
    assert [s.label for s in out] == [s.label for s in ds]
    assert manifest.flagged_ids == ["A/001.png", "A/004.png", "B/002.png"]
    for before, after in zip(ds, out):
        if before.sample_id in manifest.flagged_ids:
            assert not torch.equal(before.pixels, after.pixels)
            assert after.source_path is None
        else:
            assert after is before


def test_statistics_cover_the_whole_class():
    ds = _untrusted()
    _, manifest = filter_training_set(ds, OracleDetector(), NoiseConfig(epsilon=0.1), seed=0)
    stats_a = compute_class_stats(list(ds.of_class("A")))
    entry = next(e for e in manifest.entries if e.sample_id == "A/004.png")
    assert entry.distance == pytest.approx(stats_a.per_image_distance["A/004.png"])
    assert entry.sensitivity == pytest.approx(entry.distance / stats_a.max_distance)
    assert entry.scale == pytest.approx(entry.sensitivity / 0.1)


def test_whole_class_detector_flags_every_member():
    ds = _untrusted()
    out, manifest = filter_training_set(ds, WholeClassDetector(["B"]), NoiseConfig(epsilon=0.5), seed=2)
    assert set(manifest.flagged_ids) == set(ds.of_class("B").ids)
    assert all(torch.equal(a.pixels, b.pixels) for a, b in zip(out.of_class("A"), ds.of_class("A")))


def test_degenerate_class_warns_and_passes_through():
    same = [make_sample(f"A/{k}.png", "A", 0.4, poisoned=True) for k in range(3)]
    other = [make_sample(f"B/{k}.png", "B", 0.1 * (k + 1)) for k in range(3)]
    ds = Dataset.from_samples(same + other)
    out, manifest = filter_training_set(ds, OracleDetector(), NoiseConfig(), seed=0)
    assert len(manifest.warnings) == 1 and "A" in manifest.warnings[0]
    assert manifest.degenerate_ids == [s.sample_id for s in same]
    assert all(torch.equal(a.pixels, b.pixels) for a, b in zip(out, ds))


def test_filter_is_deterministic_across_worker_counts():
    ds = _untrusted()
    single, _ = DefenseFilter(OracleDetector(), NoiseConfig(epsilon=0.2), max_workers=1).run(ds, seed=7)
    pooled, _ = DefenseFilter(OracleDetector(), NoiseConfig(epsilon=0.2), max_workers=4).run(ds, seed=7)
    assert all(torch.equal(a.pixels, b.pixels) for a, b in zip(single, pooled))


def test_stage_timings_recorded():
    _, manifest = filter_training_set(_untrusted(), OracleDetector(), NoiseConfig(), seed=0)
    assert set(manifest.timings) == {"classify", "stats", "perturb"}
    assert all(v >= 0 for v in manifest.timings.values())
    assert manifest.to_dict()["entries"][0]["id"] == "A/000.png"


def test_detector_must_return_one_verdict_per_image():
    with pytest.raises(ModelError, match="verdicts"):
        filter_training_set(_untrusted(), ShortDetector(), NoiseConfig(), seed=0)


def test_run_babam_trains_on_sanitized_data():
    ds = _untrusted()
    run = run_babam(ds, tiny_spec(), OracleDetector(), NoiseConfig(epsilon=0.1), seed=0,
                    augment=AugmentPolicy.none())
    assert run.trained_model.class_index == ds.class_index
    assert len(run.trained_model.history) == 3
    assert {"classify", "stats", "perturb", "train", "total"} <= set(run.timing)
    assert run.timing["total"] >= run.timing["train"]
    assert len(run.manifest.perturbed_ids) == 3


def test_run_babam_class_count_mismatch():
    with pytest.raises(ModelError, match="classes"):
        run_babam(_untrusted(), tiny_spec(num_classes=3), OracleDetector(), NoiseConfig(), seed=0)
