from __future__ import annotations

from typing import Dict, List, Sequence

from modal_to_text.config import TrainingRegime
from modal_to_text.dataset import MultimodalExample
from modal_to_text.seq2seq import ClassificationHead, candidate_loss, create_model_input
from modal_to_text.tensor import Tensor
from modal_to_text.text import TaskToken
from modal_to_text.tokenization import GumbelMode
from modal_to_text.trainer_api import LossTerm, Trainer
from modal_to_text.utility import ConfigError, create_rng


def attach_head(*, system, config) -> ClassificationHead:
    if system.head is None:
        system.head = ClassificationHead(
            model_width=config.model.model_width,
            candidate_count=config.train.candidate_count,
            rng=create_rng(config.seed, "head-init"),
            dtype=system.model.dtype,
        )
    return system.head


class DiscriminativeTrainer(Trainer):
    """Encoder plus a classification head over the mean-pooled encoding; the decoder is unused."""

    regime = TrainingRegime.DISCRIMINATIVE

    def __init__(self, **kwargs) -> None:
        super().__init__(**kwargs)
        self.head = attach_head(system=self.system, config=self.config)

    def trainable_parameters(self) -> Dict[str, Tensor]:
        result = dict(self.system.model.encoder_parameters())
        for channel in self.system.channels:
            result.update(channel.trainable_parameters())
        result.update(self.head.parameters())
        return result

    def validate_examples(self, examples: Sequence[MultimodalExample]) -> None:
        count = self.config.train.candidate_count
        for example in examples:
            if example.task != TaskToken.ANSWER or len(example.candidates) != count:
                raise ConfigError(
                    f"discriminative training needs exactly {count} candidates on every answer example; {example.example_id} has {len(example.candidates)}"
                )

    def example_loss_terms(self, *, example: MultimodalExample, epoch: int) -> List[LossTerm]:
        model_input = create_model_input(example, task=TaskToken.ANSWER, include_candidates=True, active_inputs=self.config.active_inputs)
        self.assembled_tasks.add(model_input.task)
        loss = candidate_loss(
            model_input=model_input,
            gold_index=example.gold_candidate_index,
            head=self.head,
            model=self.system.model,
            channels=self.system.channels,
            mode=GumbelMode.TRAIN_SAMPLE,
            seed_parts=self.seed_parts(epoch=epoch, example=example, pass_tag="discriminative"),
        )
        return [LossTerm(name="discriminative", loss=loss)]
