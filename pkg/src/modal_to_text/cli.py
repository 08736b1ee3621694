#!/usr/bin/env python3

import argparse
import os
import sys
import traceback
from typing import Any, Dict, List, Optional, Sequence, Tuple

from modal_to_text.config import ExperimentConfig, load_config, parse_override_value, write_config_snapshot
from modal_to_text.evaluation import evaluate, generate_split, score_split
from modal_to_text.experiment import (
    ablation_cells,
    best_sample_count,
    build_system,
    evaluate_run,
    load_system,
    prepare_data,
    record_metric,
    run_cells,
    run_pretrain,
    run_train,
    summarize,
    sweep_cells,
    write_results,
)
from modal_to_text.metrics import STOP_WORDS_VERSION, tfidf_correlation
from modal_to_text.synthetic import generate_world, write_world
from modal_to_text.utility import ConfigError, LoggerApi, LogLevel, create_default_logger, json_serialize

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3
EXIT_INTERRUPTED = 130

SPLIT_CHOICES = ("train", "validation", "test")
TFIDF_HEADER = "\t".join(("channel", "category", "name", "rank", "word", "score"))


def parse_set_argument(text: str) -> Tuple[str, Any]:
    key, separator, value = text.partition("=")
    if not separator or not key:
        raise argparse.ArgumentTypeError(f"Invalid --set {text!r}, expected dotted.key=value")
    return key.strip(), parse_override_value(value)


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modal-to-text", description="Multimodal-to-text experiments on a synthetic world.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Experiment config file (JSON).")
    common.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
    common.add_argument("--out-dir", type=str, default=None, help="Run directory; the synthetic data lives under <out-dir>/data.")
    common.add_argument("--checkpoint", type=str, default=None, help="Checkpoint to start from or evaluate.")
    common.add_argument("--parallelism", type=int, default=None, help="Concurrent sweep or ablation cells.")
    common.add_argument(
        "--set", type=parse_set_argument, action="append", default=[], metavar="KEY=VALUE", help="Override any config key, e.g. train.epochs=5."
    )
    common.add_argument("--split", choices=SPLIT_CHOICES, default=None, help="Split to evaluate, generate or score.")
    common.add_argument("--log-level", type=str.upper, choices=[x.name for x in LogLevel], default=None)

    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("gen-data", parents=[common], help="Generate the synthetic world and its splits.")
    subparsers.add_parser("pretrain", parents=[common], help="Pretrain the modality classifiers.")
    subparsers.add_parser("train", parents=[common], help="Train under the configured regime and path.")
    subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint in the configured evaluation mode.")
    subparsers.add_parser("generate", parents=[common], help="Print one generated text per example.")
    subparsers.add_parser("score", parents=[common], help="Print the selected candidate and candidate losses per example.")
    subparsers.add_parser("sweep-k", parents=[common], help="Two-stage sweep of the channel sample counts.")
    subparsers.add_parser("ablate", parents=[common], help="Run the ablation grid.")
    tfidf_parser = subparsers.add_parser("analyze-tfidf", parents=[common], help="Rank generated words per sampled category.")
    tfidf_parser.add_argument("--top-k", type=int, default=10)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: List[Tuple[str, Any]] = []
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.out_dir is not None:
        overrides.append(("out_dir", args.out_dir))
    if args.parallelism is not None:
        overrides.append(("parallelism", args.parallelism))
    return load_config(path=args.config, overrides=overrides + list(args.set))


def default_checkpoint(*, config: ExperimentConfig, args: argparse.Namespace) -> str:
    if args.checkpoint:
        return args.checkpoint
    return os.path.join(config.out_dir, "checkpoints", f"{config.train.regime}-final.ckpt")


def write_json(*, path: str, data) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(json_serialize(data, indent=True))


def cmd_gen_data(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    world, splits = generate_world(config=config)
    data_dir = os.path.join(config.out_dir, "data")
    write_world(world=world, splits=splits, data_dir=data_dir)
    write_config_snapshot(config=config, run_dir=config.out_dir)
    logger.info(f"synthetic world written to {data_dir}")
    print("\t".join(f"{key}={len(value)}" for key, value in splits.items()))
    return EXIT_OK


def cmd_pretrain(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    world, splits = prepare_data(config=config, logger=logger)
    write_config_snapshot(config=config, run_dir=config.out_dir)
    system = build_system(config=config, world=world, logger=logger)
    result = run_pretrain(config=config, system=system, world=world, splits=splits, run_dir=config.out_dir, logger=logger)
    for name, values in result.items():
        print(f"{name}\tloss={values['loss']:.6f}\taccuracy={values['accuracy']:.4f}")
    return EXIT_OK


def cmd_train(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    world, splits = prepare_data(config=config, logger=logger)
    outcome = run_train(config=config, world=world, splits=splits, run_dir=config.out_dir, checkpoint_path=args.checkpoint, logger=logger)
    split = args.split or "validation"
    report = evaluate_run(system=outcome.system, config=config, examples=splits[split], logger=logger)
    write_json(
        path=os.path.join(config.out_dir, "train-report.json"),
        data={
            "split": split,
            "metrics": report.as_record(),
            "training": [x.as_readable_dict() for x in outcome.training],
            "classifier_accuracy": outcome.classifier_accuracy,
        },
    )
    print(json_serialize({"split": split, **report.as_readable_dict()}))
    return EXIT_OK


def load_for_inference(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi):
    world, splits = prepare_data(config=config, logger=logger)
    system = load_system(config=config, world=world, path=default_checkpoint(config=config, args=args), logger=logger)
    return system, splits[args.split or "test"]


def cmd_eval(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    system, examples = load_for_inference(config=config, args=args, logger=logger)
    report = evaluate(system=system, examples=examples, mode=config.evaluation_mode, config=config, logger=logger)
    split = args.split or "test"
    write_json(path=os.path.join(config.out_dir, f"eval-{split}-{config.evaluation_mode}.json"), data={"split": split, "metrics": report.as_record()})
    print(json_serialize({"split": split, "mode": str(config.evaluation_mode), **report.as_readable_dict()}))
    return EXIT_OK


def cmd_generate(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    system, examples = load_for_inference(config=config, args=args, logger=logger)
    for record in generate_split(system=system, examples=examples, config=config, logger=logger):
        print(f"{record.example_id}\t{record.text}")
    return EXIT_OK


def cmd_score(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    system, examples = load_for_inference(config=config, args=args, logger=logger)
    for record in score_split(system=system, examples=examples, config=config, logger=logger):
        print(f"{record.example_id}\t{record.selected_index}\t" + ",".join(f"{x.loss:.6f}" for x in record.scores))
    return EXIT_OK


def collect_records(*, cells, config: ExperimentConfig, split: str, records: List[Dict[str, Any]], out_dir: str, logger: LoggerApi) -> List[Dict[str, Any]]:
    # finished cells land in results.jsonl at once so an interrupt keeps them
    partial_path = os.path.join(out_dir, "results.jsonl")

    def on_result(record: Dict[str, Any]) -> None:
        records.append(record)
        with open(partial_path, "a") as f:
            f.write(json_serialize(record))
            f.write("\n")
        logger.info(f"{len(records)} cells finished, latest {record['cell']} seed {record['seed']}")

    return run_cells(cells=cells, split=split, parallelism=config.parallelism, on_result=on_result)


def start_results(out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    partial_path = os.path.join(out_dir, "results.jsonl")
    if os.path.exists(partial_path):
        os.remove(partial_path)


def cmd_sweep_k(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    out_dir = os.path.join(config.out_dir, "sweep-k")
    split = args.split or "validation"
    metric = config.sweep.metric
    stage_1_cells = sweep_cells(config=config, root_dir=out_dir, stage=1)
    first, second = config.channels[0], config.channels[1]
    write_config_snapshot(config=config, run_dir=out_dir)
    start_results(out_dir)
    finished: List[Dict[str, Any]] = []
    try:
        stage_1 = collect_records(cells=stage_1_cells, config=config, split=split, records=finished, out_dir=out_dir, logger=logger)
        best = best_sample_count(records=stage_1, channel_name=first.name, metric=metric)
        logger.info(f"stage 1 picked {first.name} K={best}")
        stage_2_cells = sweep_cells(config=config, root_dir=out_dir, stage=2, first_sample_count=best)
        stage_2 = collect_records(cells=stage_2_cells, config=config, split=split, records=finished, out_dir=out_dir, logger=logger)
    except KeyboardInterrupt:
        write_results(records=finished, out_dir=out_dir)
        raise
    write_results(records=stage_1 + stage_2, out_dir=out_dir)
    lines = [f"stage 1: {first.name} K -> {metric} ({second.name} excluded)"]
    lines += [f"{x['sample_counts'][first.name]}\t{record_metric(x, metric):.4f}" for x in stage_1]
    lines += ["", f"stage 2: {first.name} K fixed at {best}; {second.name} K -> {metric}"]
    lines += [f"{x['sample_counts'][second.name]}\t{record_metric(x, metric):.4f}" for x in stage_2]
    summary = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_ablate(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    out_dir = os.path.join(config.out_dir, "ablate")
    cells = ablation_cells(config=config, root_dir=out_dir)
    write_config_snapshot(config=config, run_dir=out_dir)
    start_results(out_dir)
    logger.info(f"ablation grid of {len(cells)} runs, parallelism {config.parallelism}")
    finished: List[Dict[str, Any]] = []
    try:
        records = collect_records(cells=cells, config=config, split=args.split or "test", records=finished, out_dir=out_dir, logger=logger)
    except KeyboardInterrupt:
        write_results(records=finished, out_dir=out_dir)
        raise
    write_results(records=records, out_dir=out_dir)
    summary = summarize(records=records, axes=("inputs", "path", "regime", "data_fraction"))
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_analyze_tfidf(*, config: ExperimentConfig, args: argparse.Namespace, logger: LoggerApi) -> int:
    system, examples = load_for_inference(config=config, args=args, logger=logger)
    if not examples:
        raise ConfigError(f"split {args.split or 'test'} is empty")
    records = generate_split(system=system, examples=examples, config=config, logger=logger)
    table = tfidf_correlation(
        generated=[x.text for x in records],
        sampled_categories=[x.sampled_categories for x in records],
        category_counts={x.name: x.config.category_count for x in system.channels},
        speech=[x.speech for x in records],
        top_k=args.top_k,
    )
    for channel, categories in table.never_sampled.items():
        if categories:
            logger.warning(f"{channel}: categories never sampled {categories}")
    category_names = {x.name: x.category_names for x in system.channels}
    path = os.path.join(config.out_dir, "tfidf.tsv")
    os.makedirs(config.out_dir, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# stop words v{STOP_WORDS_VERSION}\n")
        f.write(TFIDF_HEADER)
        f.write("\n")
        for row in table.rows(category_names=category_names):
            channel, category, name, rank, word, score = row
            f.write(f"{channel}\t{category}\t{name}\t{rank}\t{word}\t{score:.6f}\n")
    print(path)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "score": cmd_score,
    "sweep-k": cmd_sweep_k,
    "ablate": cmd_ablate,
    "analyze-tfidf": cmd_analyze_tfidf,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = create_parser().parse_args(argv)
    level = LogLevel[args.log_level] if args.log_level else None
    logger = create_default_logger(name="modal-to-text", level=level)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config=config, args=args, logger=logger)
    except ConfigError as exception:
        print(f"config error: {exception}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except KeyboardInterrupt:
        print("interrupted; finished results were kept", file=sys.stderr)
        return EXIT_INTERRUPTED
    except Exception as exception:
        logger.debug(traceback.format_exc())
        print(f"error: {exception!r}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
