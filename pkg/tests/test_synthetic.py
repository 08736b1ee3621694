#!/usr/bin/env python3

import numpy as np
import pytest

from modal_to_text.experiment import build_system
from modal_to_text.synthetic import (
    classifier_accuracy,
    corrupted_label_map,
    create_world,
    generate_world,
    pretrain_classifier,
    read_world,
    write_world,
)
from modal_to_text.text import TaskToken
from modal_to_text.utility import ConfigError
from tiny_world import tiny_config

LARGER_WORLD = [("world.train_size", 200), ("world.validation_size", 100), ("world.pretrain_steps", 300)]


def test_generation_is_deterministic():
    config = tiny_config()
    first_world, first = generate_world(config=config)
    second_world, second = generate_world(config=config)
    assert first_world.as_record() == second_world.as_record()
    for split in first:
        assert [x.as_readable_dict() for x in first[split]] == [x.as_readable_dict() for x in second[split]]


def test_world_seed_overrides_the_run_seed():
    _, first = generate_world(config=tiny_config([("seed", 1), ("world.seed", 5)]))
    _, second = generate_world(config=tiny_config([("seed", 2), ("world.seed", 5)]))
    assert [x.answer for x in first["train"]] == [x.answer for x in second["train"]]


def test_splits_are_disjoint_and_sized():
    config = tiny_config()
    _, splits = generate_world(config=config)
    assert {key: len(value) for key, value in splits.items()} == {"train": 16, "validation": 8, "test": 8}
    ids = [x.example_id for value in splits.values() for x in value]
    assert len(ids) == len(set(ids))
    features = {tuple(x.features["video"]) for value in splits.values() for x in value}
    assert len(features) == len(ids)


def test_candidates_hold_the_gold_answer_and_distinct_distractors():
    _, splits = generate_world(config=tiny_config())
    for example in splits["train"]:
        assert example.task == TaskToken.ANSWER
        assert len(example.candidates) == 3
        assert len(set(example.candidates)) == 3
        assert example.candidates[example.gold_candidate_index] == example.answer


def test_oracle_answers_everything_without_noise():
    config = tiny_config([("world.noise_scale", 0.0), ("world.miscalibration", 0.0)])
    world, splits = generate_world(config=config)
    for example in splits["test"]:
        assert world.oracle_answer(example) == example.answer


def test_caption_and_dialog_examples():
    world, splits = generate_world(config=tiny_config([("world.caption_fraction", 0.5), ("world.dialog_fraction", 0.5)]))
    tasks = {x.task for x in splits["train"]}
    assert tasks <= {TaskToken.CAPTION, TaskToken.DIALOG}
    for example in splits["train"]:
        if example.task == TaskToken.CAPTION:
            assert example.answer.startswith("there is ")
            assert example.speech
        else:
            assert example.history.startswith("earlier someone")
            assert example.question_type == "video+audio"


def test_miscalibration_corrupts_a_fixed_share_of_categories():
    world = create_world(config=tiny_config([("world.miscalibration", 0.5)]))
    assert len(world.corrupted_categories["video"]) == 3
    assert len(world.corrupted_categories["audio"]) == 3
    assert sorted(world.label_permutations["video"]) == list(range(6))
    clean = [x for x in range(6) if x not in world.corrupted_categories["video"]]
    assert all(world.corrupt_label(channel_name="video", category=x) == x for x in clean)
    for name in ("video", "audio"):
        corrupted = world.corrupted_categories[name]
        mapped = [world.corrupt_label(channel_name=name, category=x) for x in corrupted]
        assert all(x != y for x, y in zip(corrupted, mapped))
        assert sorted(mapped) == list(corrupted)


@pytest.mark.parametrize("category_count, miscalibration, expected", [(5, 0.3, 2), (3, 0.3, 2), (6, 0.1, 2), (6, 0.0, 0), (6, 1.0, 6)])
def test_corrupted_categories_are_relabelled_among_themselves(category_count, miscalibration, expected):
    config = tiny_config([("channels.0.category_count", category_count), ("channels.0.sample_count", 1), ("world.miscalibration", miscalibration)])
    world = create_world(config=config)
    corrupted = world.corrupted_categories["video"]
    assert len(corrupted) == expected
    for category in range(category_count):
        label = world.corrupt_label(channel_name="video", category=category)
        assert (label != category) == (category in corrupted)
        assert (label in corrupted) == (category in corrupted)


def test_corrupted_label_map_is_a_cycle_along_the_order():
    assert corrupted_label_map(category_count=5, order=[4, 1, 2]) == (0, 2, 4, 3, 1)
    assert corrupted_label_map(category_count=3, order=[]) == (0, 1, 2)


def pretrained_accuracy(overrides):
    config = tiny_config(LARGER_WORLD + overrides)
    world, splits = generate_world(config=config)
    system = build_system(config=config, world=world)
    channel = system.channel("video")
    pretrain_classifier(world=world, channel=channel, examples=splits["train"])
    return world, splits, channel, classifier_accuracy(channel=channel, examples=splits["validation"])


def test_clean_labels_give_a_near_bayes_classifier():
    _, _, _, accuracy = pretrained_accuracy([("world.noise_scale", 0.05), ("world.miscalibration", 0.0)])
    assert accuracy >= 0.95


def test_fully_relabelled_categories_give_near_zero_clean_accuracy():
    world, _, _, accuracy = pretrained_accuracy([("world.noise_scale", 0.05), ("world.miscalibration", 1.0)])
    assert len(world.corrupted_categories["video"]) == 6
    assert accuracy <= 0.05


def test_pretraining_is_deterministic():
    config = tiny_config()
    world, splits = generate_world(config=config)
    weights = []
    for _ in range(2):
        channel = build_system(config=config, world=world).channel("audio")
        pretrain_classifier(world=world, channel=channel, examples=splits["train"])
        weights.append(channel.classifier_weight.data.copy())
        assert channel.classifier_weight.grad is None
    np.testing.assert_array_equal(weights[0], weights[1])


def test_written_world_reads_back(tmp_path):
    config = tiny_config()
    world, splits = generate_world(config=config)
    write_world(world=world, splits=splits, data_dir=str(tmp_path))
    read, read_splits = read_world(config=config, data_dir=str(tmp_path))
    assert read.as_record() == world.as_record()
    for split, examples in splits.items():
        assert [x.as_readable_dict() for x in read_splits[split]] == [x.as_readable_dict() for x in examples]
        for a, b in zip(examples, read_splits[split]):
            np.testing.assert_array_equal(a.features["video"], b.features["video"])


@pytest.mark.parametrize("overrides", [[("seed", 1)], [("world.noise_scale", 0.9)], [("channels.0.category_count", 7)]])
def test_stale_data_is_rejected(tmp_path, overrides):
    world, splits = generate_world(config=tiny_config())
    write_world(world=world, splits=splits, data_dir=str(tmp_path))
    with pytest.raises(ConfigError, match="rerun gen-data"):
        read_world(config=tiny_config(overrides), data_dir=str(tmp_path))


def test_missing_data_directory(tmp_path):
    with pytest.raises(ConfigError, match="gen-data"):
        read_world(config=tiny_config(), data_dir=str(tmp_path / "nothing"))


if __name__ == "__main__":
    test_generation_is_deterministic()
    test_oracle_answers_everything_without_noise()
    test_pretraining_is_deterministic()
