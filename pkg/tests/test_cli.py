from __future__ import annotations

import json

import torch

from babam import cli
from babam.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, LOCK_FILE, main
from babam.defenses.pirm import PIRM_CLASS_INDEX, PirmSpec, TrainedPirm, save_pirm
from babam.models.classifier import build_classifier

from conftest import SIZE, write_image_folder


def _error(out):
    return json.loads((out / "error.json").read_text())


def test_missing_config_exits_with_config_error(tmp_path):
    out = tmp_path / "run"
    assert main(["reproduce", "--out", str(out)]) == EXIT_CONFIG
    assert "--config" in " ".join(_error(out)["violations"])


def test_invalid_config_names_the_key(tmp_path, image_folder):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"seed": 1, "data": {"root": str(image_folder)}, "poison": {"fraction": 2.0},
                                  "scenario": {"mode": "multiclass", "source_class": "alice",
                                               "target_class": "bob", "class_list": ["alice", "bob"]}}))
    out = tmp_path / "run"
    assert main(["reproduce", "--config", str(config), "--out", str(out)]) == EXIT_CONFIG
    error = _error(out)
    assert error["error"] == "ConfigValidationError"
    assert any(v.startswith("poison.fraction") for v in error["violations"])


def test_defend_oracle_on_clean_folder_copies_bytes(tmp_path, image_folder):
    out = tmp_path / "defended"
    code = main(["defend", "--data", str(image_folder), "--oracle", "--seed", "0", "--no-train",
                 "--out", str(out)])
    assert code == EXIT_OK
    for src in sorted(image_folder.rglob("*.png")):
        rel = src.relative_to(image_folder)
        assert (out / "sanitized" / rel).read_bytes() == src.read_bytes()
    manifest = json.loads((out / "defense_manifest.json").read_text())
    assert manifest["flagged"] == 0 and manifest["images"] == 6
    assert (out / "timings.json").is_file()
    assert not (out / LOCK_FILE).exists()


def test_defend_perturbs_only_provenance_flagged_files(tmp_path):
    data = write_image_folder(tmp_path / "untrusted", {"alice": 4, "bob": 4}, size=16, seed=3)
    (data / "provenance.json").write_text(json.dumps({"poisoned": ["bob/001.png"]}))
    out = tmp_path / "defended"
    code = main(["defend", "--data", str(data), "--oracle", "--epsilon", "0.05", "--seed", "0",
                 "--no-train", "--out", str(out)])
    assert code == EXIT_OK
    manifest = json.loads((out / "defense_manifest.json").read_text())
    assert manifest["perturbed"] == 1
    assert (out / "sanitized" / "bob" / "001.png").read_bytes() != (data / "bob" / "001.png").read_bytes()
    assert (out / "sanitized" / "bob" / "002.png").read_bytes() == (data / "bob" / "002.png").read_bytes()
    assert (out / "sanitized" / "provenance.json").is_file()


def test_defend_rejects_conflicting_detectors(tmp_path, image_folder):
    out = tmp_path / "run"
    code = main(["defend", "--data", str(image_folder), "--oracle", "--pirm", str(tmp_path), "--seed", "0",
                 "--out", str(out)])
    assert code == EXIT_CONFIG


def test_locked_output_directory(tmp_path, image_folder):
    out = tmp_path / "busy"
    out.mkdir()
    (out / LOCK_FILE).write_text("1234")
    code = main(["defend", "--data", str(image_folder), "--oracle", "--seed", "0", "--no-train",
                 "--out", str(out)])
    assert code == EXIT_RUNTIME
    assert "locked" in _error(out)["message"]


def test_train_pirm_needs_two_classes(tmp_path):
    corpus = write_image_folder(tmp_path / "corpus", {"only": 4})
    out = tmp_path / "pirm"
    assert main(["train-pirm", "--corpus", str(corpus), "--seed", "0", "--out", str(out)]) == EXIT_RUNTIME
    assert _error(out)["error"] == "DataError"


def test_unreadable_data_folder_is_a_runtime_error(tmp_path):
    out = tmp_path / "run"
    code = main(["defend", "--data", str(tmp_path / "absent"), "--oracle", "--seed", "0", "--out", str(out)])
    assert code == EXIT_RUNTIME


def _always_poisoned_pirm(path):
    spec = PirmSpec(head_widths=(8,), image_size=(SIZE, SIZE))
    model = build_classifier(spec.to_model_spec(), seed=0)
    model.class_index = dict(PIRM_CLASS_INDEX)
    with torch.no_grad():
        model.network.head.logits.weight.zero_()
        model.network.head.logits.bias.fill_(3.0)
    save_pirm(TrainedPirm(model=model, spec=spec), path)
    return path


def _write_config(tmp_path, root, **sections):
    raw = {"seed": 0, "data": {"root": str(root), "image_size": [SIZE, SIZE]},
           "scenario": {"mode": "multiclass", "source_class": "alice", "target_class": "bob",
                        "class_list": ["alice", "bob"]}}
    raw.update(sections)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


def test_defend_takes_the_detector_from_the_config(tmp_path, image_folder):
    checkpoint = _always_poisoned_pirm(tmp_path / "pirm")
    config = _write_config(tmp_path, image_folder,
                           defense={"detector": "pirm", "pirm_checkpoint": str(checkpoint), "epsilon": 0.05})
    out = tmp_path / "defended"
    assert main(["defend", "--config", str(config), "--no-train", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "defense_manifest.json").read_text())
    assert manifest["detector"] == "pirm"
    assert manifest["flagged"] == 6 and manifest["epsilon"] == 0.05


def test_defend_without_any_detector_is_a_config_error(tmp_path, image_folder):
    out = tmp_path / "run"
    code = main(["defend", "--data", str(image_folder), "--seed", "0", "--no-train", "--out", str(out)])
    assert code == EXIT_CONFIG
    assert "--oracle" in _error(out)["violations"][0]

    config = _write_config(tmp_path, image_folder, defense={"detector": "none"})
    assert main(["defend", "--config", str(config), "--no-train", "--out", str(out)]) == EXIT_CONFIG


def test_binary_evaluate_requires_the_poison_manifest(tmp_path):
    data = write_image_folder(tmp_path / "faces", {"alice": 3, "bob": 3, "carol": 3})
    config = _write_config(tmp_path, data, scenario={"mode": "binary", "source_class": "alice",
                                                     "target_class": "bob", "negative_classes": ["carol"]})
    out = tmp_path / "eval"
    code = main(["evaluate", "--config", str(config), "--model", str(tmp_path / "model"), "--out", str(out)])
    assert code == EXIT_CONFIG
    assert any(v.startswith("--poison-manifest") for v in _error(out)["violations"])


def test_unexpected_exception_is_a_runtime_error(tmp_path, monkeypatch):
    def crash(args, out):
        raise KeyError("layer")

    monkeypatch.setitem(cli.COMMANDS, "train", crash)
    out = tmp_path / "run"
    assert main(["train", "--out", str(out)]) == EXIT_RUNTIME
    assert _error(out)["error"] == "KeyError"
    assert not (out / LOCK_FILE).exists()
