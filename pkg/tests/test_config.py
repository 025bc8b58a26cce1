from __future__ import annotations

import json

import pytest

from babam.config import load_config, parse_config
from babam.core.errors import ConfigValidationError
from babam.core.types import ScenarioMode
from babam.models.spec import FreezeMode

from conftest import SIZE, make_dataset


def _raw(root, **overrides):
    raw = {
        "seed": 7,
        "data": {"root": str(root), "image_size": [SIZE, SIZE]},
        "scenario": {"mode": "multiclass", "source_class": "alice", "target_class": "bob",
                     "class_list": ["alice", "bob"]},
    }
    raw.update(overrides)
    return raw


def test_minimal_config_uses_desk_defaults(image_folder):
    config = parse_config(_raw(image_folder))
    assert config.seed == 7 and config.profile == "desk"
    assert config.model.epochs == 15 and config.model.learning_rate == 0.01
    assert config.defense.epsilon == 0.01
    assert config.data.image_size == (SIZE, SIZE)


def test_full_profile_overrides_hyperparameters(image_folder):
    config = parse_config(_raw(image_folder), profile="full")
    assert (config.model.epochs, config.model.learning_rate, config.model.batch_size) == (24, 0.0001, 256)
    assert config.pirm.profile == "full-layers"


def test_file_values_win_over_profile(image_folder):
    config = parse_config(_raw(image_folder, model={"epochs": 2}), profile="full")
    assert config.model.epochs == 2 and config.model.batch_size == 256


def test_every_violation_is_reported(image_folder):
    raw = _raw(image_folder, model={"epochs": "ten", "dropout": 1.5, "colour": "red"}, extra=1)
    with pytest.raises(ConfigValidationError) as info:
        parse_config(raw)
    text = "\n".join(info.value.violations)
    assert "model.epochs: expected integer" in text
    assert "model.dropout" in text
    assert "model.colour: unknown key" in text
    assert "extra: unknown key" in text


def test_missing_seed_and_classes(image_folder):
    raw = {"data": {"root": str(image_folder)}, "scenario": {"mode": "multiclass"}}
    with pytest.raises(ConfigValidationError) as info:
        parse_config(raw)
    joined = " ".join(info.value.violations)
    assert "seed: required" in joined
    assert "scenario.source_class: required" in joined


def test_seed_argument_overrides_file(image_folder):
    assert parse_config(_raw(image_folder), seed=99).seed == 99


def test_missing_data_root(tmp_path):
    with pytest.raises(ConfigValidationError, match="directory not found"):
        parse_config(_raw(tmp_path / "absent"))
    assert parse_config(_raw(tmp_path / "absent"), check_paths=False).data.root.endswith("absent")


def test_binary_mode_needs_negatives(image_folder):
    raw = _raw(image_folder, scenario={"mode": "binary", "source_class": "alice", "target_class": "bob"})
    with pytest.raises(ConfigValidationError, match="negative_classes"):
        parse_config(raw)


def test_fraction_guard(image_folder):
    with pytest.raises(ConfigValidationError, match="max_fraction"):
        parse_config(_raw(image_folder, poison={"fraction": 0.9}))
    config = parse_config(_raw(image_folder, poison={"fraction": 0.9, "max_fraction": 0.95}))
    assert config.poison_plan().fraction == 0.9


def test_load_config_reports_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigValidationError, match="invalid JSON"):
        load_config(path)


def test_load_config_round_trip(image_folder, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(_raw(image_folder, defense={"epsilon": 0.05})))
    config = load_config(path)
    assert config.noise_config().epsilon == 0.05
    assert json.loads(json.dumps(config.to_dict()))["defense"]["epsilon"] == 0.05


def test_derived_objects(image_folder):
    config = parse_config(_raw(image_folder, model={"freeze_mode": "freeze_first_k", "freeze_k": 2}))
    spec = config.model_spec(5)
    assert spec.num_classes == 5 and spec.freeze_mode == FreezeMode.FREEZE_FIRST_K and spec.freeze_k == 2
    assert spec.image_size == (SIZE, SIZE)
    assert config.target_label() == "bob"
    assert config.trigger_patch().size == (8, 8)
    assert config.pirm_spec().image_size == (SIZE, SIZE)


def test_top_classes_keep_source_and_target(image_folder):
    raw = _raw(image_folder, scenario={"mode": "multiclass", "source_class": "c00", "target_class": "c01",
                                       "top_classes": 3})
    config = parse_config(raw)
    ds = make_dataset({f"c{i:02d}": 2 + i for i in range(6)}, size=4)
    spec = config.scenario_spec(ds)
    assert spec.mode == ScenarioMode.MULTICLASS
    assert set(spec.class_list) == {"c05", "c04", "c03", "c00", "c01"}


def test_binary_target_label_is_positive(image_folder):
    raw = _raw(image_folder, scenario={"mode": "binary", "source_class": "alice", "target_class": "bob",
                                       "negative_classes": ["carol"]})
    assert parse_config(raw).target_label() == "positive"
