from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from modal_to_text.checkpoint import save_checkpoint
from modal_to_text.config import ExperimentConfig, TrainingRegime, architecture_hash
from modal_to_text.dataset import MultimodalExample
from modal_to_text.decoding import ConditionedDecoder, greedy_decode
from modal_to_text.optimizer import Adam, learning_rate_at_epoch
from modal_to_text.seq2seq import MultimodalSystem, create_model_input, encode_input, sequence_loss
from modal_to_text.tensor import Tape, Tensor, add, no_grad, scale
from modal_to_text.text import TaskToken
from modal_to_text.tokenization import GumbelMode
from modal_to_text.utility import (
    DegenerateBatchError,
    DivergenceError,
    Logger,
    LoggerApi,
    LogLevel,
    NumericError,
    Writer,
    ceil_fraction,
    convert_list_to_sublists,
    convert_time_point_delta_to_seconds,
    create_rng,
    json_serialize,
    time_point_now,
    time_point_subtract,
)

METRICS_LOG_HEADER = "\t".join(("kind", "epoch", "step", "learning_rate", "loss", "components", "skipped_consistency"))


@dataclass(frozen=True, kw_only=True)
class LossTerm:
    name: str
    loss: Tensor
    weight: float = 1.0


@dataclass(frozen=True, kw_only=True)
class EpochRecord:
    epoch: int
    learning_rate: float
    mean_loss: float
    component_means: Mapping[str, float] = field(default_factory=dict)
    skipped_consistency: int = 0
    example_count: int = 0
    step_count: int = 0
    seconds: float = 0.0


@dataclass(frozen=True, kw_only=True)
class TrainingResult:
    regime: TrainingRegime
    epochs: Tuple[EpochRecord, ...]
    example_ids: Tuple[str, ...]
    checkpoint_path: Optional[str] = None

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].mean_loss if self.epochs else float("nan")

    def as_readable_dict(self):
        return {
            "regime": str(self.regime),
            "epochs": len(self.epochs),
            "example_count": len(self.example_ids),
            "final_loss": self.final_loss,
            "checkpoint_path": self.checkpoint_path,
        }


def combine_loss_terms(terms: Sequence[LossTerm]) -> Tensor:
    """Weighted mean of the terms; a single term passes through untouched."""
    if not terms:
        raise DegenerateBatchError("no loss terms for this example")
    if len(terms) == 1:
        return terms[0].loss
    total_weight = sum(x.weight for x in terms)
    combined = scale(terms[0].loss, terms[0].weight / total_weight)
    for term in terms[1:]:
        combined = add(combined, scale(term.loss, term.weight / total_weight))
    return combined


def select_training_examples(*, examples: Sequence[MultimodalExample], seed: int, data_fraction: float) -> List[MultimodalExample]:
    if not examples:
        raise ValueError("training needs a non-empty dataset")
    order = create_rng(seed, "data-order").permutation(len(examples))
    count = ceil_fraction(count=len(examples), fraction=data_fraction)
    return [examples[x] for x in order[:count]]


class Trainer:
    regime: TrainingRegime

    def __init__(
        self,
        *,
        system: MultimodalSystem,
        config: ExperimentConfig,
        run_dir: Optional[str] = None,
        epochs: Optional[int] = None,
        logger: Optional[LoggerApi] = None,
    ) -> None:
        self.system = system
        self.config = config
        self.run_dir = run_dir
        self.epochs = epochs if epochs is not None else config.train.epochs
        self.logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
        self.skipped_consistency = 0
        self.last_good_checkpoint_path: Optional[str] = None
        self.assembled_tasks: Set[TaskToken] = set()

    def trainable_parameters(self) -> Dict[str, Tensor]:
        result = dict(self.system.model.parameters())
        for channel in self.system.channels:
            result.update(channel.trainable_parameters())
        return result

    def example_loss_terms(self, *, example: MultimodalExample, epoch: int) -> List[LossTerm]:
        raise NotImplementedError

    def start_epoch(self, *, epoch: int) -> None:
        self.skipped_consistency = 0

    def seed_parts(self, *, epoch: int, example: MultimodalExample, pass_tag: str) -> Tuple:
        return (self.config.seed, epoch, example.example_id, pass_tag)

    def input_for(self, example: MultimodalExample, **kwargs):
        model_input = create_model_input(example, include_candidates=self.config.decode.candidates_in_input, active_inputs=self.config.active_inputs, **kwargs)
        self.assembled_tasks.add(model_input.task)
        return model_input

    def target_ids(self, text: str) -> List[int]:
        return self.system.tokenizer.tokenize(text, append_eos=True)

    def answer_loss(self, *, example: MultimodalExample, epoch: int, pass_tag: str = "answer", question_override: Optional[str] = None) -> Tensor:
        model_input = self.input_for(example, task=example.task, question_override=question_override)
        return sequence_loss(
            model_input=model_input,
            target_ids=self.target_ids(example.answer),
            model=self.system.model,
            channels=self.system.channels,
            mode=GumbelMode.TRAIN_SAMPLE,
            seed_parts=self.seed_parts(epoch=epoch, example=example, pass_tag=pass_tag),
        )

    def question_loss(self, *, example: MultimodalExample, epoch: int, pass_tag: str = "question", answer_text: Optional[str] = None) -> Tensor:
        if not example.question:
            raise ValueError(f"example {example.example_id} has no question to generate")
        answer_text = answer_text if answer_text is not None else example.answer
        model_input = self.input_for(example, task=TaskToken.QUESTION, drop_question=True, extra_segments=(answer_text,))
        return sequence_loss(
            model_input=model_input,
            target_ids=self.target_ids(example.question),
            model=self.system.model,
            channels=self.system.channels,
            mode=GumbelMode.TRAIN_SAMPLE,
            seed_parts=self.seed_parts(epoch=epoch, example=example, pass_tag=pass_tag),
        )

    def greedy_text(self, *, example: MultimodalExample, task: TaskToken, **kwargs) -> str:
        with no_grad():
            model_input = create_model_input(
                example, task=task, include_candidates=self.config.decode.candidates_in_input, active_inputs=self.config.active_inputs, **kwargs
            )
            encoded = encode_input(model_input=model_input, model=self.system.model, channels=self.system.channels, mode=GumbelMode.EVAL_DETERMINISTIC)
            tokens = greedy_decode(decoder=ConditionedDecoder(model=self.system.model, z=encoded.z), max_length=self.config.decode.max_length)
        return self.system.tokenizer.detokenize(tokens)

    def save(self, *, name: str, metadata: Optional[Dict] = None) -> Optional[str]:
        if not self.run_dir:
            return None
        path = save_checkpoint(
            path=os.path.join(self.run_dir, "checkpoints", name),
            parameters=self.system.parameters(),
            vocabulary=self.system.tokenizer.tokens,
            config_hash=architecture_hash(self.config),
            seed=self.config.seed,
            metadata=dict(metadata or {}, regime=str(self.regime)),
        )
        self.logger.info(f"checkpoint written to {path}")
        return path

    def train(self, *, examples: Sequence[MultimodalExample]) -> TrainingResult:
        train_config = self.config.train
        selected = select_training_examples(examples=examples, seed=self.config.seed, data_fraction=train_config.data_fraction)
        self.validate_examples(selected)
        optimizer = Adam(parameters=self.trainable_parameters(), learning_rate=train_config.learning_rate, logger=self.logger)
        writer = Writer(write_path=os.path.join(self.run_dir, "metrics.tsv"), write_header=METRICS_LOG_HEADER) if self.run_dir else None
        self.last_good_checkpoint_path = self.save(name=f"{self.regime}-initial.ckpt", metadata={"epoch": 0})
        records = []
        step = 0
        try:
            for epoch in range(1, self.epochs + 1):
                start_time_point = time_point_now()
                optimizer.learning_rate = learning_rate_at_epoch(
                    base_learning_rate=train_config.learning_rate, epoch=epoch, epochs=self.epochs, milestones=train_config.milestones
                )
                self.start_epoch(epoch=epoch)
                self.logger.info(f"{self.regime} epoch {epoch}/{self.epochs} on {len(selected)} examples, learning rate {optimizer.learning_rate}")
                order = create_rng(self.config.seed, "epoch-order", epoch).permutation(len(selected))
                loss_sum = 0.0
                component_sums: Dict[str, float] = {}
                component_counts: Dict[str, int] = {}
                for batch in convert_list_to_sublists(input=list(order), sublist_length=train_config.batch_size):
                    optimizer.zero_grad()
                    batch_loss = 0.0
                    batch_components: Dict[str, float] = {}
                    for index in batch:
                        example = selected[index]
                        with Tape():
                            terms = self.example_loss_terms(example=example, epoch=epoch)
                            total = combine_loss_terms(terms)
                            total_value = total.item()
                            if not np.isfinite(total_value):
                                raise DivergenceError(
                                    f"loss became {total_value} at epoch {epoch}, example {example.example_id}",
                                    last_good_checkpoint_path=self.last_good_checkpoint_path,
                                )
                            scale(total, 1.0 / len(batch)).backward()
                        batch_loss += total_value
                        for term in terms:
                            value = term.loss.item()
                            batch_components[term.name] = batch_components.get(term.name, 0.0) + value
                            component_sums[term.name] = component_sums.get(term.name, 0.0) + value
                            component_counts[term.name] = component_counts.get(term.name, 0) + 1
                    try:
                        optimizer.step()
                    except NumericError as exception:
                        raise DivergenceError(str(exception), last_good_checkpoint_path=self.last_good_checkpoint_path) from exception
                    step += 1
                    loss_sum += batch_loss
                    self.logger.fine(f"step {step} loss {batch_loss / len(batch):.6f}")
                    if writer:
                        mean_batch_loss = batch_loss / len(batch)
                        values = ("step", epoch, step, optimizer.learning_rate, mean_batch_loss, json_serialize(batch_components), self.skipped_consistency)
                        writer.write_record(values=values)
                component_means = {key: component_sums[key] / component_counts[key] for key in component_sums}
                record = EpochRecord(
                    epoch=epoch,
                    learning_rate=optimizer.learning_rate,
                    mean_loss=loss_sum / len(selected),
                    component_means=component_means,
                    skipped_consistency=self.skipped_consistency,
                    example_count=len(selected),
                    step_count=step,
                    seconds=convert_time_point_delta_to_seconds(
                        time_point_delta=time_point_subtract(time_point_1=time_point_now(), time_point_2=start_time_point)
                    ),
                )
                records.append(record)
                if self.skipped_consistency:
                    self.logger.warning(f"epoch {epoch}: skipped consistency terms for {self.skipped_consistency} examples with an empty generated answer")
                self.logger.info(record)
                if writer:
                    writer.write_record(
                        values=("epoch", epoch, step, record.learning_rate, record.mean_loss, json_serialize(component_means), record.skipped_consistency)
                    )
                self.last_good_checkpoint_path = self.save(name=f"{self.regime}-last.ckpt", metadata={"epoch": epoch})
        finally:
            if writer:
                writer.close()
        final_path = self.save(name=f"{self.regime}-final.ckpt", metadata={"epoch": self.epochs})
        return TrainingResult(regime=self.regime, epochs=tuple(records), example_ids=tuple(x.example_id for x in selected), checkpoint_path=final_path)

    def validate_examples(self, examples: Sequence[MultimodalExample]) -> None:
        pass
