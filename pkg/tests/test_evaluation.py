from __future__ import annotations

import pytest
import torch
from torch import nn

from babam.core.dataset import Dataset
from babam.core.errors import DataError, ModelError
from babam.core.types import TriggerPatch
from babam.engines.evaluation import (
    EvalReport,
    attack_success_rate,
    build_patched_test_set,
    clean_accuracy,
    evaluate_model,
    natural_misclassification_baseline,
    success_rate,
)
from babam.models.classifier import TrainedModel

from conftest import SIZE, make_sample, tiny_spec


class RedThreshold(nn.Module):
    """Class 1 ("victim") when the mean red value exceeds 0.5, else class 0."""

    def __init__(self) -> None:
        super().__init__()
        self.gain = nn.Parameter(torch.tensor(20.0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        score = self.gain * (x[:, 0].mean(dim=(1, 2)) - 0.5)
        return torch.stack([torch.zeros_like(score), score], dim=1)


def red_model() -> TrainedModel:
    return TrainedModel(spec=tiny_spec(), network=RedThreshold(), class_index={"other": 0, "victim": 1})


def _attackers(reds):
    return [make_sample(f"attacker/{k}.png", "attacker", (r, 0.2, 0.2)) for k, r in enumerate(reds)]


def test_success_rate_counts_target_predictions():
    images = _attackers([0.9] * 7 + [0.1] * 3)
    assert success_rate(red_model(), images, "victim") == pytest.approx(0.7)


def test_unknown_target_class():
    with pytest.raises(ModelError, match="target class"):
        success_rate(red_model(), _attackers([0.9]), "nobody")


def test_empty_patch_matches_unpatched_rate():
    images = _attackers([0.9] * 7 + [0.1] * 3)
    empty = TriggerPatch(pixels=torch.zeros(3, 0, 0))
    result = attack_success_rate(red_model(), images, "victim", trials=5, seed=1, patch=empty)
    assert result.mean == pytest.approx(success_rate(red_model(), images, "victim"))
    assert result.std == 0.0
    assert result.trials == 5


def test_covering_red_patch_always_succeeds():
    patch = TriggerPatch(pixels=torch.tensor([1.0, 0.0, 0.0]).view(3, 1, 1).expand(3, SIZE, SIZE).clone())
    result = attack_success_rate(red_model(), _attackers([0.1] * 4), "victim", trials=3, seed=0, patch=patch)
    assert result.mean == 1.0 and result.per_trial == [1.0, 1.0, 1.0]
    assert result.confidence > 0.99


def test_trials_must_be_positive():
    with pytest.raises(DataError):
        attack_success_rate(red_model(), _attackers([0.5]), "victim", trials=0)


def test_patched_set_is_deterministic_and_prefixed():
    patch = TriggerPatch.random(4, seed=3)
    a = build_patched_test_set(_attackers([0.3, 0.6]), patch, seed=5)
    b = build_patched_test_set(_attackers([0.3, 0.6]), patch, seed=5)
    assert a.ids == ["patched/attacker/0.png", "patched/attacker/1.png"]
    assert all(torch.equal(x.pixels, y.pixels) for x, y in zip(a, b))


def test_patched_set_refuses_training_images():
    with pytest.raises(DataError, match="training set"):
        build_patched_test_set(_attackers([0.3]), TriggerPatch.random(2), seed=0,
                               training_ids=["attacker/0.png"])


def test_clean_accuracy_per_class():
    samples = [make_sample("v/0", "victim", (0.9, 0, 0)), make_sample("v/1", "victim", (0.1, 0, 0)),
               make_sample("o/0", "other", (0.2, 0, 0)), make_sample("o/1", "other", (0.3, 0, 0))]
    acc, per_class = clean_accuracy(red_model(), Dataset.from_samples(samples, classes=["other", "victim"]))
    assert acc == pytest.approx(0.75)
    assert per_class == {"other": 1.0, "victim": 0.5}


def test_natural_baseline_uses_unpatched_images():
    assert natural_misclassification_baseline(red_model(), _attackers([0.9, 0.1, 0.1, 0.1]), "victim") == 0.25


def test_report_rejects_out_of_range_values():
    with pytest.raises(DataError):
        EvalReport(label="x", asr=1.5, asr_std=0.0, clean_accuracy=0.5)
    with pytest.raises(DataError):
        EvalReport(label="x", asr=0.5, asr_std=-0.1, clean_accuracy=0.5)


def test_evaluate_model_fills_the_report():
    test_set = Dataset.from_samples([make_sample("o/0", "other", (0.2, 0, 0)),
                                     make_sample("v/0", "victim", (0.8, 0, 0))])
    report = evaluate_model(red_model(), test_set, _attackers([0.1, 0.1]), TriggerPatch.random(2, seed=0),
                            "victim", trials=2, seed=0, label="undefended", config_snapshot={"seed": 0},
                            baseline_model=red_model())
    assert report.clean_accuracy == 1.0
    assert report.natural_misclassification == 0.0
    assert report.to_dict()["config"] == {"seed": 0}
    assert report.row()["label"] == "undefended"
    assert len(report.asr_per_trial) == 2
