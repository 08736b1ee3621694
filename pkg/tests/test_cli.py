#!/usr/bin/env python3

import os

import pytest

from modal_to_text.cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, TFIDF_HEADER, create_parser, main, parse_set_argument
from modal_to_text.experiment import RESULTS_TSV_HEADER, ablation_cells, run_cells, sweep_cells
from modal_to_text.utility import ConfigError, json_deserialize, json_serialize
from tiny_world import TINY_OVERRIDES, tiny_config

FAST_OVERRIDES = [("train.epochs", 1), ("world.validation_size", 4), ("world.test_size", 4)]


def set_flags(overrides):
    flags = []
    for key, value in overrides:
        flags += ["--set", f"{key}={json_serialize(value)}"]
    return flags


def run(capsys, command, out_dir, *extra, overrides=()):
    code = main([command, "--out-dir", str(out_dir)] + set_flags(TINY_OVERRIDES + FAST_OVERRIDES + list(overrides)) + list(extra))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_set_argument_parsing():
    assert parse_set_argument("train.epochs=5") == ("train.epochs", 5)
    assert parse_set_argument("train.regime=qa+qg") == ("train.regime", "qa+qg")
    assert parse_set_argument('active_inputs=["question","video"]') == ("active_inputs", ["question", "video"])
    args = create_parser().parse_args(["score", "--split", "validation", "--set", "seed=3"])
    assert args.split == "validation"
    assert args.set == [("seed", 3)]


def test_invalid_config_exits_before_compute(tmp_path, capsys):
    code, _, err = run(capsys, "train", tmp_path, overrides=[("channels.0.sample_count", 99)])
    assert code == EXIT_CONFIG_ERROR
    assert "K=99" in err
    assert not os.path.exists(tmp_path / "data")


def test_missing_checkpoint_is_a_runtime_failure(tmp_path, capsys):
    assert run(capsys, "gen-data", tmp_path)[0] == EXIT_OK
    code, _, err = run(capsys, "eval", tmp_path, "--checkpoint", str(tmp_path / "missing.ckpt"))
    assert code == EXIT_RUNTIME_ERROR
    assert "does not exist" in err


def test_data_from_another_seed_is_rejected(tmp_path, capsys):
    assert run(capsys, "gen-data", tmp_path)[0] == EXIT_OK
    code, _, err = run(capsys, "train", tmp_path, "--seed", "1")
    assert code == EXIT_CONFIG_ERROR
    assert "gen-data" in err


def test_pipeline(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", tmp_path)
    assert code == EXIT_OK
    assert out.strip() == "train=16\tvalidation=4\ttest=4"
    assert os.path.exists(tmp_path / "data" / "world.json")

    code, out, _ = run(capsys, "pretrain", tmp_path)
    assert code == EXIT_OK
    assert [x.split("\t")[0] for x in out.strip().splitlines()] == ["video", "audio"]
    assert os.path.exists(tmp_path / "checkpoints" / "pretrained.ckpt")

    code, out, _ = run(capsys, "train", tmp_path)
    assert code == EXIT_OK
    assert json_deserialize(out)["split"] == "validation"
    report = json_deserialize((tmp_path / "train-report.json").read_bytes())
    assert set(report["classifier_accuracy"]) == {"video", "audio"}
    assert os.path.exists(tmp_path / "checkpoints" / "qa-final.ckpt")
    assert os.path.exists(tmp_path / "config.json")

    first = run(capsys, "eval", tmp_path)
    first_file = (tmp_path / "eval-test-generate.json").read_bytes()
    second = run(capsys, "eval", tmp_path)
    assert first[0] == second[0] == EXIT_OK
    assert first[1] == second[1]
    assert (tmp_path / "eval-test-generate.json").read_bytes() == first_file
    metrics = json_deserialize(first_file)["metrics"]
    assert metrics["counts"]["generated"] == 4

    code, out, _ = run(capsys, "generate", tmp_path)
    assert code == EXIT_OK
    lines = out.splitlines()
    assert len(lines) == 4
    assert all(x.startswith("test-") and "\t" in x for x in lines)

    code, out, _ = run(capsys, "score", tmp_path, "--split", "validation")
    assert code == EXIT_OK
    for line in out.splitlines():
        example_id, selected, losses = line.split("\t")
        assert example_id.startswith("validation-")
        assert 0 <= int(selected) < 3
        values = [float(x) for x in losses.split(",")]
        assert len(values) == 3
        assert values[int(selected)] == min(values)

    code, out, _ = run(capsys, "analyze-tfidf", tmp_path, "--top-k", "3")
    assert code == EXIT_OK
    lines = (tmp_path / "tfidf.tsv").read_text().splitlines()
    assert lines[0] == "# stop words v1"
    assert lines[1] == TFIDF_HEADER
    assert all(len(x.split("\t")) == 6 for x in lines[2:])


def test_score_mode_evaluation(tmp_path, capsys):
    assert run(capsys, "train", tmp_path)[0] == EXIT_OK
    code, out, _ = run(capsys, "eval", tmp_path, overrides=[("evaluation_mode", "score-candidates")])
    assert code == EXIT_OK
    result = json_deserialize(out)
    assert result["mode"] == "score-candidates"
    assert 0.0 <= result["top1_accuracy"] <= 1.0
    assert os.path.exists(tmp_path / "eval-test-score-candidates.json")


def test_sweep_stage_one_leaves_the_second_channel_out(tmp_path):
    config = tiny_config([("sweep.first_channel_grid", [2, 3]), ("sweep.second_channel_grid", [1, 2])])
    cells = sweep_cells(config=config, root_dir=str(tmp_path), stage=1)
    assert [x.config_data["channels"][0]["sample_count"] for x in cells] == [2, 3]
    assert all("audio" not in x.config_data["active_inputs"] and "video" in x.config_data["active_inputs"] for x in cells)
    stage_2 = sweep_cells(config=config, root_dir=str(tmp_path), stage=2, first_sample_count=3)
    assert [(x.config_data["channels"][0]["sample_count"], x.config_data["channels"][1]["sample_count"]) for x in stage_2] == [(3, 1), (3, 2)]
    assert all(x.config_data["active_inputs"] is None for x in stage_2)
    with pytest.raises(ConfigError):
        sweep_cells(config=tiny_config([("sweep.first_channel_grid", [7])]), root_dir=str(tmp_path), stage=1)


def test_sweep_command(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep-k", tmp_path, overrides=[("sweep.first_channel_grid", [2, 3]), ("sweep.second_channel_grid", [1, 2])])
    assert code == EXIT_OK
    assert out.startswith("stage 1: video K")
    records = [json_deserialize(x) for x in (tmp_path / "sweep-k" / "results.jsonl").read_text().splitlines()]
    assert [x["stage"] for x in records] == ["stage-1", "stage-1", "stage-2", "stage-2"]
    assert [x["sample_counts"]["audio"] for x in records[2:]] == [1, 2]
    assert records[0]["assembled_length"] < records[2]["assembled_length"]
    assert (tmp_path / "sweep-k" / "results.tsv").read_text().splitlines()[0] == RESULTS_TSV_HEADER


def test_ablation_cells_differ_only_in_the_varied_axes(tmp_path):
    config = tiny_config([("ablation.input_subsets", ["Q+V", "Q+V+A"]), ("ablation.paths", ["differentiable", "frozen"]), ("ablation.seeds", [0, 1])])
    cells = ablation_cells(config=config, root_dir=str(tmp_path))
    assert len(cells) == 8
    assert len({x.run_dir for x in cells}) == 8
    first, second = cells[0], cells[2]
    assert (first.labels["path"], second.labels["path"], first.seed, second.seed) == ("differentiable", "frozen", 0, 0)
    differing = {key for key in first.config_data if first.config_data[key] != second.config_data[key]}
    assert differing == {"channels", "out_dir"}
    assert [x["path"] for x in second.config_data["channels"]] == ["frozen", "frozen"]


def test_ablate_command_with_fewer_channels_assembles_shorter_inputs(tmp_path, capsys):
    overrides = [("ablation.input_subsets", ["Q+V", "Q+V+A"]), ("ablation.seeds", [0])]
    code, out, _ = run(capsys, "ablate", tmp_path, overrides=overrides)
    assert code == EXIT_OK
    assert "== inputs ==" in out
    records = {x["inputs"]: x for x in map(json_deserialize, (tmp_path / "ablate" / "results.jsonl").read_text().splitlines())}
    # two audio categories of two tokens each plus their separator
    assert records["Q+V+A"]["assembled_length"] - records["Q+V"]["assembled_length"] == 5
    assert os.path.exists(os.path.join(records["Q+V"]["run_dir"], "result.json"))


def test_cells_give_the_same_records_in_parallel(tmp_path):
    config = tiny_config(FAST_OVERRIDES + [("ablation.input_subsets", ["Q+V", "Q+A"]), ("ablation.seeds", [0])])
    sequential = run_cells(cells=ablation_cells(config=config, root_dir=str(tmp_path / "sequential")), split="test", parallelism=1)
    parallel = run_cells(cells=ablation_cells(config=config, root_dir=str(tmp_path / "parallel")), split="test", parallelism=2)
    for a, b in zip(sequential, parallel):
        assert a["metrics"] == b["metrics"]
        assert a["final_loss"] == b["final_loss"]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
