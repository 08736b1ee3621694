#!/usr/bin/env python3

import os

import pytest

from modal_to_text.config import (
    ExperimentConfig,
    TokenizationPath,
    TrainingRegime,
    architecture_hash,
    config_to_dict,
    expand_input_subset,
    load_config,
    replace_config,
    serialize_config,
    write_config_snapshot,
)
from modal_to_text.utility import ConfigError


def test_defaults_validate():
    config = load_config()
    assert config == ExperimentConfig()
    assert [(x.name, x.category_count, x.sample_count) for x in config.channels] == [("video", 20, 12), ("audio", 10, 6)]
    assert config.train.milestones == (0.5, 0.75)


def test_precedence_is_overrides_then_file_then_defaults(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text('{"seed": 7, "train": {"epochs": 3, "regime": "cycle"}}')
    config = load_config(path=str(path), overrides=[("train.epochs", 5), ("channels.0.path", "frozen")])
    assert config.seed == 7
    assert config.train.epochs == 5
    assert config.train.regime == TrainingRegime.CYCLE
    assert config.channels[0].path == TokenizationPath.FROZEN
    assert config.channels[1].path == TokenizationPath.DIFFERENTIABLE


def test_snapshot_round_trip(tmp_path):
    config = load_config(overrides=[("seed", 3), ("active_inputs", ["question", "video"]), ("train.regime", "qa+qg")])
    snapshot = write_config_snapshot(config=config, run_dir=str(tmp_path))
    assert os.path.basename(snapshot) == "config.json"
    assert load_config(path=snapshot) == config
    assert serialize_config(load_config(path=snapshot)) == serialize_config(config)


@pytest.mark.parametrize(
    "overrides,message",
    [
        ([("channels.0.sample_count", 21)], "K=21"),
        ([("train.milestones", [0.75, 0.5])], "milestones"),
        ([("train.milestones", [0.5, 1.0])], "milestones"),
        ([("train.data_fraction", 0.0)], "data_fraction"),
        ([("train.data_fraction", 1.5)], "data_fraction"),
        ([("train.regime", "unsupervised")], "regime"),
        ([("channels.1.path", "magic")], "path"),
        ([("world.miscalibration", 1.5)], "miscalibration"),
        ([("world.question_types", ["video+smell"])], "smell"),
        ([("active_inputs", ["question", "smell"])], "smell"),
        ([("model.heads", 3)], "divisible"),
        ([("world.candidate_count", 4), ("train.regime", "discriminative")], "candidate_count"),
    ],
)
def test_invalid_configs_are_rejected_before_compute(overrides, message):
    with pytest.raises(ConfigError, match=message):
        load_config(overrides=overrides)


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(overrides=[("train.epoch", 3)])
    path = tmp_path / "experiment.json"
    path.write_text('{"trainer": {}}')
    with pytest.raises(ConfigError, match="unknown"):
        load_config(path=str(path))


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(path=str(tmp_path / "missing.json"))
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path=str(path))


def test_architecture_hash_ignores_training_settings():
    config = load_config()
    assert architecture_hash(config) == architecture_hash(replace_config(config, [("train.epochs", 1), ("seed", 9)]))
    assert architecture_hash(config) != architecture_hash(replace_config(config, [("channels.0.sample_count", 8)]))


@pytest.mark.parametrize(
    "subset,expected",
    [("Q", ("question",)), ("Q+V", ("question", "video")), ("Q+V+A+H", ("question", "video", "audio", "history")), ("speech+audio", ("speech", "audio"))],
)
def test_expand_input_subset(subset, expected):
    assert expand_input_subset(subset) == expected


def test_default_ablation_grid_ends_with_dialog_history():
    subsets = load_config().ablation.input_subsets
    assert subsets == ("Q", "Q+V", "Q+V+A", "Q+V+A+H")
    assert expand_input_subset(subsets[-1]) == ("question", "video", "audio", "history")


def test_config_to_dict_uses_plain_values():
    data = config_to_dict(load_config())
    assert data["train"]["regime"] == "qa"
    assert data["channels"][0]["path"] == "differentiable"
    assert data["active_inputs"] is None


if __name__ == "__main__":
    test_defaults_validate()
    test_architecture_hash_ignores_training_settings()
