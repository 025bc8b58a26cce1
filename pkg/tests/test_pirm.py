from __future__ import annotations

import math

import pytest
import torch

from babam.adapters.pirm_detector import PirmDetector
from babam.core.errors import DataError, ModelError, TrainingError
from babam.core.types import PoisonPlan, TriggerPatch
from babam.defenses.pirm import (
    CLEAN,
    POISONED,
    PIRM_CLASS_INDEX,
    PirmSpec,
    TrainedPirm,
    build_pirm_corpus,
    classify_poison,
    classify_poisons,
    load_pirm,
    poison_confidences,
    save_pirm,
    train_pirm,
    with_threshold,
)
from babam.models.classifier import build_classifier
from babam.models.spec import FreezeMode, TrainHyperParams

from conftest import SIZE, make_dataset, make_sample


def _spec(**changes) -> PirmSpec:
    values = dict(head_widths=(16,), image_size=(SIZE, SIZE),
                  hyperparams=TrainHyperParams(epochs=2, learning_rate=1e-3, batch_size=8, optimizer="adam"))
    values.update(changes)
    return PirmSpec(**values)


def _constant_pirm(confidence: float, threshold: float = 0.5) -> TrainedPirm:
    """Recognizer whose poisoned-probability is `confidence` for every input."""
    spec = _spec(threshold=threshold)
    model = build_classifier(spec.to_model_spec(), seed=0)
    model.class_index = dict(PIRM_CLASS_INDEX)
    with torch.no_grad():
        model.network.head.logits.weight.zero_()
        model.network.head.logits.bias.fill_(math.log(confidence / (1 - confidence)))
    return TrainedPirm(model=model, spec=spec)


def _plan() -> PoisonPlan:
    return PoisonPlan(source_class="src", target_class="tgt", iterations=0)


def _corpus(max_per_label=6, seed=0):
    base = make_dataset({"a": 6, "b": 6, "c": 6, "d": 6}, noise=0.3)
    return build_pirm_corpus(base, 0.5, _plan(), seed, lambda x: x.flatten(1),
                             TriggerPatch.random(3, seed=1), max_per_label=max_per_label)


def test_spec_freezes_all_but_the_tail():
    model_spec = _spec(unfrozen_tail=3).to_model_spec()
    assert model_spec.freeze_mode == FreezeMode.FREEZE_FIRST_K
    assert model_spec.freeze_k == 1
    assert model_spec.output_dim == 1
    assert _spec(unfrozen_tail=4).to_model_spec().freeze_mode == FreezeMode.UNFROZEN


def test_threshold_must_be_inside_unit_interval():
    for t in (0.0, 1.0, 1.5):
        with pytest.raises(ModelError):
            _spec(threshold=t)


def test_confidence_below_threshold_is_clean():
    pirm = _constant_pirm(0.6, threshold=0.7)
    verdict = classify_poison(pirm, make_sample("x", "A"))
    assert verdict.flag == 0
    assert verdict.confidence == pytest.approx(0.6, abs=1e-5)


def test_confidence_above_threshold_is_poisoned():
    pirm = _constant_pirm(0.6, threshold=0.5)
    assert classify_poison(pirm, make_sample("x", "A")).flag == 1


def test_tie_flags_as_poisoned():
    pirm = _constant_pirm(0.5, threshold=0.5)
    verdict = classify_poison(pirm, make_sample("x", "A"))
    assert verdict.confidence == 0.5
    assert verdict.flag == 1


def test_batch_matches_single():
    pirm = _constant_pirm(0.3)
    samples = [make_sample(f"s{k}", "A", 0.1 * k) for k in range(4)]
    assert [v.flag for v in classify_poisons(pirm, samples)] == [0, 0, 0, 0]
    assert classify_poisons(pirm, []) == []


def test_corpus_is_balanced_and_disjoint():
    corpus = _corpus(max_per_label=5)
    counts = corpus.dataset.label_counts()
    assert counts[CLEAN] == 5 and counts[POISONED] == 5
    assert corpus.overlap() == set()
    assert len(corpus.poisoned_classes) == 2
    assert all(tid.split("/")[0] in corpus.poisoned_classes for tid in corpus.target_ids)
    assert all(sid.split("/")[0] not in corpus.poisoned_classes for sid in corpus.source_ids)
    assert all(s.sample_id.startswith(f"{POISONED}/") for s in corpus.dataset.of_class(POISONED))


def test_corpus_needs_a_poisoned_class():
    base = make_dataset({"a": 4, "b": 4})
    with pytest.raises(DataError, match="no poisoned class"):
        build_pirm_corpus(base, 0.0, _plan(), 0, lambda x: x.flatten(1), TriggerPatch.random(2, seed=0))


def test_corpus_needs_a_clean_class():
    base = make_dataset({"a": 4, "b": 4})
    with pytest.raises(DataError, match="no clean class"):
        build_pirm_corpus(base, 1.0, _plan(), 0, lambda x: x.flatten(1), TriggerPatch.random(2, seed=0))


def test_training_on_one_label_fails():
    corpus = _corpus().dataset
    only_clean = corpus.filter(lambda s: s.label == CLEAN)
    with pytest.raises(TrainingError, match="both labels"):
        train_pirm(_spec(), only_clean, seed=0)


def test_training_is_deterministic():
    corpus = _corpus()
    first = train_pirm(_spec(), corpus, seed=3)
    second = train_pirm(_spec(), corpus, seed=3)
    for a, b in zip(first.model.network.parameters(), second.model.network.parameters()):
        assert torch.equal(a, b)
    assert 0.0 <= first.held_out_accuracy <= 1.0
    assert first.held_out_accuracy == second.held_out_accuracy


def test_raising_threshold_never_flags_more():
    corpus = _corpus()
    pirm = train_pirm(_spec(), corpus, seed=1)
    samples = list(corpus.dataset)
    flagged = [sum(v.flag for v in classify_poisons(with_threshold(pirm, t), samples))
               for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(b <= a for a, b in zip(flagged, flagged[1:]))


def test_detector_rejects_other_image_sizes():
    detector = PirmDetector(_constant_pirm(0.4))
    with pytest.raises(ModelError, match="does not match"):
        detector.classify([make_sample("x", "A", size=SIZE // 2)])


def test_detector_batches_preserve_order():
    pirm = _constant_pirm(0.8)
    samples = [make_sample(f"s{k}", "A", 0.05 * k) for k in range(7)]
    verdicts = PirmDetector(pirm, batch_size=3).classify(samples)
    assert len(verdicts) == 7 and all(v.flag == 1 for v in verdicts)


def test_save_and_load_round_trip(tmp_path):
    pirm = _constant_pirm(0.65, threshold=0.6)
    save_pirm(pirm, tmp_path / "pirm")
    loaded = load_pirm(tmp_path / "pirm")
    assert loaded.threshold == 0.6
    assert loaded.image_size == (SIZE, SIZE)
    x = torch.rand(3, 3, SIZE, SIZE)
    assert torch.allclose(poison_confidences(loaded, x), poison_confidences(pirm, x))
