from __future__ import annotations

import hashlib
import json

import pytest
import torch
from PIL import Image

from babam.adapters.image_folder import ImageFolderSource, load_image_directory, save_image_directory
from babam.core.dataset import (
    NEGATIVE,
    POSITIVE,
    Dataset,
    attacker_pool,
    build_scenario,
    mark_poisoned,
    split,
    top_represented_classes,
)
from babam.core.errors import DataError
from babam.core.types import ScenarioMode, ScenarioSpec

from conftest import make_dataset, make_sample


def _digest(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for s in dataset:
        h.update(s.sample_id.encode())
        h.update(s.pixels.numpy().tobytes())
    return h.hexdigest()


def test_load_two_classes(image_folder):
    ds = load_image_directory(image_folder, (64, 64))
    assert len(ds) == 6
    assert ds.classes == ["alice", "bob"]
    assert ds.image_size == (64, 64)
    assert ds.ids == sorted(ds.ids)
    assert all(0.0 <= float(s.pixels.min()) and float(s.pixels.max()) <= 1.0 for s in ds)


def test_load_is_deterministic(image_folder):
    assert _digest(load_image_directory(image_folder, (16, 16))) == _digest(load_image_directory(image_folder, (16, 16)))


def test_empty_class_dir_is_an_error(image_folder):
    (image_folder / "carol").mkdir()
    with pytest.raises(DataError, match="class with zero samples"):
        load_image_directory(image_folder)


def test_missing_root_is_an_error(tmp_path):
    with pytest.raises(DataError):
        load_image_directory(tmp_path / "nowhere")


def test_undecodable_file_skipped_and_reported(image_folder, tmp_path):
    (image_folder / "alice" / "broken.png").write_bytes(b"not an image")
    report = tmp_path / "load_report.json"
    ds, rep = ImageFolderSource(image_folder, (16, 16)).load(report)
    assert len(ds) == 6
    assert [s["path"] for s in rep.skipped] == ["alice/broken.png"]
    assert json.loads(report.read_text())["skipped"][0]["path"] == "alice/broken.png"


def test_save_copies_unmodified_files_byte_for_byte(image_folder, tmp_path):
    ds = load_image_directory(image_folder, (16, 16))
    out = tmp_path / "copy"
    save_image_directory(ds, out, modified_ids=[])
    for s in ds:
        assert (out / s.sample_id).read_bytes() == (image_folder / s.sample_id).read_bytes()


def test_reencoded_names_keep_their_suffix(tmp_path):
    src = tmp_path / "mixed" / "a"
    src.mkdir(parents=True)
    Image.new("RGB", (16, 16), (200, 10, 10)).save(src / "x.jpg")
    Image.new("RGB", (16, 16), (10, 200, 10)).save(src / "x.png")
    ds = load_image_directory(tmp_path / "mixed", (16, 16))
    written = save_image_directory(ds, tmp_path / "out")
    assert sorted(written.values()) == ["a/x.jpg.png", "a/x.png"]
    assert (tmp_path / "out" / "a" / "x.jpg.png").is_file()


def test_colliding_output_names_are_rejected(tmp_path):
    first = make_sample("a/x.jpg", "a", 0.2)
    second = make_sample("a/x.jpg.png", "a", 0.4)
    with pytest.raises(DataError, match="both be written"):
        save_image_directory(Dataset.from_samples([first, second]), tmp_path / "out")


def test_binary_scenario_balances_negatives():
    ds = make_dataset({"A": 50, "B": 30, "C": 20, "S": 10}, size=4)
    spec = ScenarioSpec(mode=ScenarioMode.BINARY, source_class="S", target_class="A", negative_classes=("B", "C"))
    scen = build_scenario(ds, spec)
    counts = scen.label_counts()
    assert counts[POSITIVE] == 50 and counts[NEGATIVE] == 50
    assert not any(s.sample_id.startswith("S/") for s in scen)
    assert len(attacker_pool(ds, spec)) == 10


def test_binary_negative_cap_round_robins_classes():
    ds = make_dataset({"A": 10, "B": 30, "C": 20, "S": 1}, size=4)
    spec = ScenarioSpec(mode=ScenarioMode.BINARY, source_class="S", target_class="A", negative_classes=("B", "C"))
    negatives = build_scenario(ds, spec).of_class(NEGATIVE)
    origins = [s.sample_id.split("/")[0] for s in negatives]
    assert origins.count("B") == 5 and origins.count("C") == 5


def test_source_among_negatives_rejected():
    ds = make_dataset({"A": 3, "B": 3, "S": 3}, size=4)
    spec = ScenarioSpec(mode=ScenarioMode.BINARY, source_class="S", target_class="A", negative_classes=("B", "S"))
    with pytest.raises(DataError, match="source class"):
        build_scenario(ds, spec)


def test_multiclass_scenario_keeps_counts():
    counts = {f"c{i:02d}": 5 + i for i in range(14)}
    ds = make_dataset(counts, size=4)
    keep = tuple(top_represented_classes(ds, 12))
    spec = ScenarioSpec(mode=ScenarioMode.MULTICLASS, source_class=keep[0], target_class=keep[1], class_list=keep)
    scen = build_scenario(ds, spec)
    assert len(scen.classes) == 12
    assert {c: scen.label_counts()[c] for c in keep} == {c: counts[c] for c in keep}
    assert "c00" not in scen.class_index and "c01" not in scen.class_index


def test_scenario_with_absent_class():
    ds = make_dataset({"A": 3, "B": 3}, size=4)
    spec = ScenarioSpec(mode=ScenarioMode.MULTICLASS, source_class="A", target_class="Z", class_list=("A", "Z"))
    with pytest.raises(DataError, match="Z"):
        build_scenario(ds, spec)


def test_split_seventy_thirty():
    ds = make_dataset({"A": 100}, size=4)
    train, val, test = split(ds, (0.7, 0.0, 0.3), seed=3)
    assert (len(train), len(val), len(test)) == (70, 0, 30)


def test_split_all_train():
    ds = make_dataset({"A": 7, "B": 4}, size=4)
    train, val, test = split(ds, (1.0, 0.0, 0.0), seed=0)
    assert train.ids == ds.ids
    assert len(val) == 0 and len(test) == 0


def test_split_same_seed_same_membership():
    ds = make_dataset({"A": 40, "B": 25}, size=4)
    first = [set(p.ids) for p in split(ds, (0.6, 0.2, 0.2), seed=11)]
    second = [set(p.ids) for p in split(ds, (0.6, 0.2, 0.2), seed=11)]
    assert first == second


def test_split_is_stratified_within_one_sample():
    ds = make_dataset({"A": 41, "B": 23, "C": 10}, size=4)
    train, _, test = split(ds, (0.7, 0.0, 0.3), seed=5)
    for label, n in ds.label_counts().items():
        assert abs(train.label_counts()[label] - 0.7 * n) <= 1
        assert abs(test.label_counts()[label] - 0.3 * n) <= 1


def test_split_keeps_poisons_in_train():
    ds = make_dataset({"A": 20, "B": 20}, size=4)
    ds = mark_poisoned(ds, {"A/000.png", "A/001.png", "B/005.png"})
    train, val, test = split(ds, (0.5, 0.25, 0.25), seed=1)
    assert {"A/000.png", "A/001.png", "B/005.png"} <= set(train.ids)
    assert not val.poisoned().samples and not test.poisoned().samples


def test_split_too_few_samples_names_class():
    ds = make_dataset({"A": 10, "tiny": 2}, size=4)
    with pytest.raises(DataError, match="tiny"):
        split(ds, (0.6, 0.2, 0.2), seed=0)


def test_split_fractions_must_sum_to_one():
    with pytest.raises(DataError):
        split(make_dataset({"A": 4}, size=4), (0.5, 0.2, 0.2), seed=0)


def test_provenance_partition():
    ds = mark_poisoned(make_dataset({"A": 4, "B": 4}, size=4), {"B/000.png"})
    assert len(ds.benign()) + len(ds.poisoned()) == len(ds)
    assert ds.provenance_counts["B"] == {"clean": 3, "poisoned": 1}


def test_sample_rejects_out_of_range_pixels():
    with pytest.raises(DataError):
        make_sample("x", "A").replace(pixels=torch.full((3, 4, 4), 1.5))
