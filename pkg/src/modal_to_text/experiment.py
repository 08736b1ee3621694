from __future__ import annotations

import asyncio
import dataclasses
import functools
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from modal_to_text.checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from modal_to_text.config import (
    TEXT_INPUTS,
    EvaluationMode,
    ExperimentConfig,
    TrainingRegime,
    architecture_hash,
    config_from_dict,
    config_to_dict,
    expand_input_subset,
    replace_config,
    write_config_snapshot,
)
from modal_to_text.dataset import MultimodalExample
from modal_to_text.evaluation import evaluate
from modal_to_text.metrics import MetricReport, mean
from modal_to_text.seq2seq import EncoderDecoderModel, MultimodalSystem, assembled_length, create_model_input
from modal_to_text.synthetic import SyntheticWorld, classifier_accuracy, generate_world, pretrain_classifier, read_world, write_world
from modal_to_text.text import TextTokenizer
from modal_to_text.tokenization import ModalityChannel
from modal_to_text.trainer_api import TrainingResult
from modal_to_text.trainers import create_trainer
from modal_to_text.trainers.discriminative import DiscriminativeTrainer, attach_head
from modal_to_text.utility import CheckpointError, ConfigError, Logger, LoggerApi, LogLevel, create_default_logger, create_rng, json_serialize

DATA_DIR_NAME = "data"
PRETRAINED_CHECKPOINT_NAME = "pretrained.ckpt"
METRIC_FIELDS = ("exact_match", "top1_accuracy", "head_top1_accuracy", "bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l")
RESULTS_TSV_HEADER = "\t".join(
    ("cell", "seed", "stage", "inputs", "path", "regime", "data_fraction", "sample_counts")
    + METRIC_FIELDS
    + ("final_loss", "assembled_length", "run_dir")
)


def data_dir_for(config: ExperimentConfig) -> str:
    return os.path.join(config.out_dir, DATA_DIR_NAME)


def prepare_data(
    *, config: ExperimentConfig, data_dir: Optional[str] = None, logger: Optional[LoggerApi] = None
) -> Tuple[SyntheticWorld, Dict[str, List[MultimodalExample]]]:
    """Read the world under `data_dir`, generating and writing it first if it is missing."""
    logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
    data_dir = data_dir if data_dir else data_dir_for(config)
    if os.path.exists(os.path.join(data_dir, "world.json")):
        logger.info(f"reading synthetic world from {data_dir}")
        return read_world(config=config, data_dir=data_dir)
    world, splits = generate_world(config=config)
    write_world(world=world, splits=splits, data_dir=data_dir)
    logger.info(f"synthetic world written to {data_dir}: " + ", ".join(f"{key} {len(value)}" for key, value in splits.items()))
    return world, splits


def build_system(*, config: ExperimentConfig, world: SyntheticWorld, logger: Optional[LoggerApi] = None) -> MultimodalSystem:
    # the vocabulary depends on the world only, so any checkpoint of this world shares it
    tokenizer = TextTokenizer.from_corpus(texts=world.texts())
    model = EncoderDecoderModel(config=config.model, tokenizer=tokenizer, rng=create_rng(config.seed, "model-init"), logger=logger)
    channels = [
        ModalityChannel(
            config=x,
            category_names=world.category_names[x.name],
            tokenizer=tokenizer,
            embedding_table=model.token_embedding.data,
            rng=create_rng(config.seed, "channel-init", x.name),
            dtype=model.dtype,
            logger=logger,
        )
        for x in config.channels
    ]
    return MultimodalSystem(tokenizer=tokenizer, model=model, channels=channels)


def save_system(*, system: MultimodalSystem, config: ExperimentConfig, path: str, metadata: Optional[Mapping[str, Any]] = None) -> str:
    return save_checkpoint(
        path=path,
        parameters=system.parameters(),
        vocabulary=system.tokenizer.tokens,
        config_hash=architecture_hash(config),
        seed=config.seed,
        metadata=metadata,
    )


def load_system(*, config: ExperimentConfig, world: SyntheticWorld, path: str, logger: Optional[LoggerApi] = None) -> MultimodalSystem:
    system = build_system(config=config, world=world, logger=logger)
    checkpoint = load_checkpoint(path=path, expected_config_hash=architecture_hash(config), expected_vocabulary=system.tokenizer.tokens)
    if any(x.startswith("head.") for x in checkpoint.arrays):
        attach_head(system=system, config=config)
    restore_parameters(parameters=system.parameters(), checkpoint=checkpoint)
    return system


def classifier_accuracies(*, system: MultimodalSystem, examples: Sequence[MultimodalExample]) -> Dict[str, float]:
    return {x.name: classifier_accuracy(channel=x, examples=examples) for x in system.channels}


def held_out_examples(splits: Mapping[str, Sequence[MultimodalExample]]) -> Sequence[MultimodalExample]:
    return splits["validation"] if splits.get("validation") else splits["train"]


def run_pretrain(
    *,
    config: ExperimentConfig,
    system: MultimodalSystem,
    world: SyntheticWorld,
    splits: Mapping[str, Sequence[MultimodalExample]],
    run_dir: Optional[str] = None,
    logger: Optional[LoggerApi] = None,
) -> Dict[str, Dict[str, float]]:
    """Pretrain every channel classifier on the training split; clean-label accuracy is measured on held-out data."""
    logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
    result = {}
    for channel in system.channels:
        loss = pretrain_classifier(world=world, channel=channel, examples=splits["train"], logger=logger)
        result[channel.name] = {"loss": loss, "accuracy": classifier_accuracy(channel=channel, examples=held_out_examples(splits))}
    if run_dir:
        path = save_system(system=system, config=config, path=os.path.join(run_dir, "checkpoints", PRETRAINED_CHECKPOINT_NAME), metadata={"pretrain": result})
        logger.info(f"pretrained checkpoint written to {path}")
    return result


@dataclass(frozen=True, kw_only=True)
class RunOutcome:
    system: MultimodalSystem
    training: Tuple[TrainingResult, ...]
    classifier_accuracy: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.training[-1].final_loss if self.training else float("nan")

    @property
    def checkpoint_path(self) -> Optional[str]:
        return self.training[-1].checkpoint_path if self.training else None


def initial_system(
    *,
    config: ExperimentConfig,
    world: SyntheticWorld,
    splits: Mapping[str, Sequence[MultimodalExample]],
    run_dir: Optional[str],
    checkpoint_path: Optional[str] = None,
    logger: Optional[LoggerApi] = None,
) -> MultimodalSystem:
    logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
    if checkpoint_path:
        logger.info(f"starting from checkpoint {checkpoint_path}")
        return load_system(config=config, world=world, path=checkpoint_path, logger=logger)
    if run_dir:
        pretrained_path = os.path.join(run_dir, "checkpoints", PRETRAINED_CHECKPOINT_NAME)
        if os.path.exists(pretrained_path):
            try:
                system = load_system(config=config, world=world, path=pretrained_path, logger=logger)
                logger.info(f"starting from pretrained classifiers in {pretrained_path}")
                return system
            except CheckpointError as exception:
                logger.warning(f"ignoring {pretrained_path}: {exception}")
    system = build_system(config=config, world=world, logger=logger)
    run_pretrain(config=config, system=system, world=world, splits=splits, run_dir=run_dir, logger=logger)
    return system


def run_train(
    *,
    config: ExperimentConfig,
    world: SyntheticWorld,
    splits: Mapping[str, Sequence[MultimodalExample]],
    run_dir: Optional[str],
    checkpoint_path: Optional[str] = None,
    logger: Optional[LoggerApi] = None,
) -> RunOutcome:
    """
    Pretrained classifiers, then the configured regime, then the optional discriminative finetune
    on top of the trained encoder.
    """
    logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
    if run_dir:
        write_config_snapshot(config=config, run_dir=run_dir)
    system = initial_system(config=config, world=world, splits=splits, run_dir=run_dir, checkpoint_path=checkpoint_path, logger=logger)
    held_out = held_out_examples(splits)
    before = classifier_accuracies(system=system, examples=held_out)

    trainer = create_trainer(regime=config.train.regime, system=system, config=config, run_dir=run_dir, logger=logger)
    results = [trainer.train(examples=splits["train"])]
    finetune_epochs = config.train.discriminative_finetune_epochs
    if finetune_epochs and config.train.regime != TrainingRegime.DISCRIMINATIVE:
        logger.info(f"discriminative finetune for {finetune_epochs} epochs")
        finetuner = DiscriminativeTrainer(system=system, config=config, run_dir=run_dir, epochs=finetune_epochs, logger=logger)
        results.append(finetuner.train(examples=splits["train"]))

    after = classifier_accuracies(system=system, examples=held_out)
    accuracy = {key: {"pretrained": before[key], "final": after[key]} for key in before}
    logger.info("classifier clean-label accuracy", accuracy)
    return RunOutcome(system=system, training=tuple(results), classifier_accuracy=accuracy)


def evaluate_run(
    *, system: MultimodalSystem, config: ExperimentConfig, examples: Sequence[MultimodalExample], logger: Optional[LoggerApi] = None
) -> MetricReport:
    """
    Generate-mode metrics (skipped for discriminative runs) merged with score-mode candidate accuracy
    when the split carries candidates. A discriminative run reports its head as top-1.
    """
    discriminative = config.train.regime == TrainingRegime.DISCRIMINATIVE
    report = MetricReport()
    if not discriminative:
        report = evaluate(system=system, examples=examples, mode=EvaluationMode.GENERATE, config=config, logger=logger)
    if any(len(x.candidates) >= 2 for x in examples):
        scored = evaluate(system=system, examples=examples, mode=EvaluationMode.SCORE_CANDIDATES, config=config, logger=logger)
        report = dataclasses.replace(
            report,
            top1_accuracy=scored.head_top1_accuracy if discriminative else scored.top1_accuracy,
            head_top1_accuracy=scored.head_top1_accuracy,
            counts={**report.counts, **scored.counts},
        )
    return report


@dataclass(frozen=True, kw_only=True)
class Cell:
    """One configuration of a sweep or ablation grid, run once per seed."""

    name: str
    seed: int
    run_dir: str
    config_data: Dict[str, Any]
    labels: Mapping[str, Any] = field(default_factory=dict)


def create_cell(*, config: ExperimentConfig, name: str, seed: int, run_dir: str, overrides: Sequence[Tuple[str, Any]], labels: Mapping[str, Any]) -> Cell:
    # validated here, before any worker starts
    cell_config = replace_config(config, list(overrides) + [("seed", seed), ("out_dir", run_dir)])
    return Cell(name=name, seed=seed, run_dir=run_dir, config_data=config_to_dict(cell_config), labels=dict(labels))


def run_cell(cell: Cell, *, split: str = "test") -> Dict[str, Any]:
    """Train and evaluate one cell in its own run directory. Top-level so a process pool can pickle it."""
    config = config_from_dict(cell.config_data)
    logger = create_default_logger(name=f"cell {cell.name} seed {cell.seed}")
    world, splits = generate_world(config=config)
    outcome = run_train(config=config, world=world, splits=splits, run_dir=cell.run_dir, logger=logger)
    examples = splits[split]
    report = evaluate_run(system=outcome.system, config=config, examples=examples, logger=logger)
    length = None
    if examples:
        model_input = create_model_input(examples[0], include_candidates=config.decode.candidates_in_input, active_inputs=config.active_inputs)
        length = assembled_length(model_input=model_input, channels=outcome.system.channels, tokenizer=outcome.system.tokenizer)
    record = {
        "cell": cell.name,
        "seed": cell.seed,
        **cell.labels,
        "sample_counts": {x.name: x.sample_count for x in config.channels},
        "split": split,
        "metrics": report.as_record(),
        "final_loss": outcome.final_loss,
        "assembled_length": length,
        "classifier_accuracy": outcome.classifier_accuracy,
        "skipped_consistency": outcome.training[-1].epochs[-1].skipped_consistency if outcome.training[-1].epochs else 0,
        "run_dir": cell.run_dir,
    }
    with open(os.path.join(cell.run_dir, "result.json"), "w") as f:
        f.write(json_serialize(record, indent=True))
    logger.info(f"cell {cell.name} seed {cell.seed} finished", report)
    return record


def install_event_loop_policy() -> None:
    try:
        import uvloop  # pylint: disable=import-outside-toplevel

        asyncio.set_event_loop_policy(uvloop.EventLoopPolicy())
    except ImportError:
        pass


async def run_cells_async(
    *, cells: Sequence[Cell], split: str, parallelism: int, on_result: Optional[Callable[[Dict[str, Any]], None]] = None
) -> List[Dict[str, Any]]:
    loop = asyncio.get_running_loop()
    semaphore = asyncio.Semaphore(parallelism)
    with ProcessPoolExecutor(max_workers=parallelism) as executor:

        async def run_one(cell: Cell) -> Dict[str, Any]:
            async with semaphore:
                record = await loop.run_in_executor(executor, functools.partial(run_cell, cell, split=split))
            if on_result:
                on_result(record)
            return record

        return await asyncio.gather(*(run_one(x) for x in cells))


def run_cells(
    *, cells: Sequence[Cell], split: str = "test", parallelism: int = 1, on_result: Optional[Callable[[Dict[str, Any]], None]] = None
) -> List[Dict[str, Any]]:
    """Results come back in cell order; `on_result` sees them as they finish."""
    if parallelism == 1:
        records = []
        for cell in cells:
            record = run_cell(cell, split=split)
            if on_result:
                on_result(record)
            records.append(record)
        return records
    install_event_loop_policy()
    return asyncio.run(run_cells_async(cells=cells, split=split, parallelism=parallelism, on_result=on_result))


def all_inputs(config: ExperimentConfig) -> Tuple[str, ...]:
    return config.active_inputs if config.active_inputs is not None else TEXT_INPUTS + tuple(x.name for x in config.channels)


def ablation_cells(*, config: ExperimentConfig, root_dir: str) -> List[Cell]:
    """Cross product of input subsets, tokenization paths, regimes and data fractions, one cell per seed."""
    ablation = config.ablation
    cells = []
    for subset, path, regime, data_fraction in itertools.product(ablation.input_subsets, ablation.paths, ablation.regimes, ablation.data_fractions):
        name = f"inputs={subset},path={path},regime={regime},fraction={data_fraction}"
        overrides: List[Tuple[str, Any]] = [
            ("active_inputs", list(expand_input_subset(subset))),
            ("train.regime", str(regime)),
            ("train.data_fraction", data_fraction),
        ]
        overrides += [(f"channels.{i}.path", str(path)) for i in range(len(config.channels))]
        labels = {"stage": "ablate", "inputs": subset, "path": str(path), "regime": str(regime), "data_fraction": data_fraction}
        directory = f"inputs-{subset.replace('+', '-')}_path-{path}_regime-{str(regime).replace('+', '-')}_fraction-{data_fraction}"
        for seed in ablation.seeds:
            cells.append(
                create_cell(
                    config=config,
                    name=name,
                    seed=seed,
                    run_dir=os.path.join(root_dir, directory, f"seed-{seed}"),
                    overrides=overrides,
                    labels=labels,
                )
            )
    return cells


def sweep_cells(*, config: ExperimentConfig, root_dir: str, stage: int, first_sample_count: Optional[int] = None) -> List[Cell]:
    """
    Stage 1 sweeps the first channel's K with the second channel left out of the inputs; stage 2
    fixes the first channel's K and sweeps the second's with every input active.
    """
    if len(config.channels) < 2:
        raise ConfigError("the two-stage K sweep needs two channels")
    first, second = config.channels[0], config.channels[1]
    cells = []
    if stage == 1:
        inputs = [x for x in all_inputs(config) if x != second.name]
        for value in config.sweep.first_channel_grid:
            cells.append(
                create_cell(
                    config=config,
                    name=f"{first.name}-k={value}",
                    seed=config.seed,
                    run_dir=os.path.join(root_dir, "stage-1", f"{first.name}-k-{value}"),
                    overrides=[("channels.0.sample_count", value), ("active_inputs", inputs)],
                    labels={"stage": "stage-1", "inputs": "+".join(inputs), "path": str(first.path), "regime": str(config.train.regime)},
                )
            )
    elif stage == 2:
        if first_sample_count is None:
            raise ValueError("stage 2 needs the first channel's sample count")
        for value in config.sweep.second_channel_grid:
            cells.append(
                create_cell(
                    config=config,
                    name=f"{first.name}-k={first_sample_count},{second.name}-k={value}",
                    seed=config.seed,
                    run_dir=os.path.join(root_dir, "stage-2", f"{second.name}-k-{value}"),
                    overrides=[("channels.0.sample_count", first_sample_count), ("channels.1.sample_count", value)],
                    labels={"stage": "stage-2", "inputs": "+".join(all_inputs(config)), "path": str(second.path), "regime": str(config.train.regime)},
                )
            )
    else:
        raise ValueError(f"Unsupported sweep stage {stage}")
    return cells


def record_metric(record: Mapping[str, Any], metric: str) -> float:
    value = record["metrics"].get(metric)
    if value is None:
        raise ConfigError(f"metric {metric} is missing from the results of cell {record['cell']}")
    return value


def best_sample_count(*, records: Sequence[Mapping[str, Any]], channel_name: str, metric: str) -> int:
    # first grid value wins ties
    best = max(range(len(records)), key=lambda i: (record_metric(records[i], metric), -i))
    return records[best]["sample_counts"][channel_name]


def results_tsv_row(record: Mapping[str, Any]) -> str:
    metrics = record["metrics"]
    values = [record["cell"], record["seed"], record.get("stage", ""), record.get("inputs", ""), record.get("path", ""), record.get("regime", "")]
    values += [record.get("data_fraction", ""), ",".join(f"{key}={value}" for key, value in record["sample_counts"].items())]
    values += ["" if metrics.get(x) is None else f"{metrics[x]:.6f}" for x in METRIC_FIELDS]
    values += [f"{record['final_loss']:.6f}", "" if record["assembled_length"] is None else record["assembled_length"], record["run_dir"]]
    return "\t".join(str(x) for x in values)


def write_results(*, records: Sequence[Mapping[str, Any]], out_dir: str) -> Tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    jsonl_path = os.path.join(out_dir, "results.jsonl")
    tsv_path = os.path.join(out_dir, "results.tsv")
    with open(jsonl_path, "w") as f:
        for record in records:
            f.write(json_serialize(record))
            f.write("\n")
    with open(tsv_path, "w") as f:
        f.write(RESULTS_TSV_HEADER)
        f.write("\n")
        for record in records:
            f.write(results_tsv_row(record))
            f.write("\n")
    return jsonl_path, tsv_path


def summarize(*, records: Sequence[Mapping[str, Any]], axes: Sequence[str], metrics: Sequence[str] = ("exact_match", "top1_accuracy")) -> str:
    """Plain-text table per varying axis: each value's metric mean and spread over the rows that share it."""
    lines = []
    for axis in axes:
        values = []
        for record in records:
            if record.get(axis) not in values:
                values.append(record.get(axis))
        if len(values) < 2 and len(axes) > 1:
            continue
        lines.append(f"== {axis} ==")
        lines.append("\t".join([axis, "rows"] + [f"{x} mean\t{x} std" for x in metrics]))
        for value in values:
            rows = [x for x in records if x.get(axis) == value]
            cells = [str(value), str(len(rows))]
            for metric in metrics:
                numbers = [x["metrics"][metric] for x in rows if x["metrics"].get(metric) is not None]
                cells += [f"{mean(numbers):.4f}", f"{float(np.std(numbers)):.4f}"] if numbers else ["-", "-"]
            lines.append("\t".join(cells))
        lines.append("")
    return "\n".join(lines)
