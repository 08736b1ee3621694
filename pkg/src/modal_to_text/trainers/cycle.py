from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

from modal_to_text.config import TrainingRegime
from modal_to_text.dataset import MultimodalExample
from modal_to_text.text import TaskToken
from modal_to_text.trainer_api import LossTerm
from modal_to_text.trainers.qa_qg import QaQgTrainer


@dataclass(frozen=True, kw_only=True)
class CycleBatchTrace:
    example_id: str
    question: str
    answer: str
    generated_answer: str
    generated_question: str
    regenerated_answer: str
    losses: Dict[str, float] = field(default_factory=dict)


class CycleTrainer(QaQgTrainer):
    """
    Answer and question generation plus two consistency terms, active from
    `train.consistency_start_epoch` on:

    1. greedy-decode an answer A' from the gold question Q
    2. greedy-decode a question Q'' from A'
    3. answer consistency: teacher-forced loss of the gold answer given Q''
    4. question consistency: teacher-forced loss of the gold question given A'

    A' and Q'' re-enter as token ids, so no gradient flows through decoding. An empty A' skips the
    consistency terms of that example.

    The consistency terms carry weight 1.0. The question term keeps `train.question_generation_weight`
    as in qa+qg, so with consistency switched off the objective is exactly the qa+qg one, and at the
    default weight of 1.0 the four terms are an unweighted mean.
    """

    regime = TrainingRegime.CYCLE
    consistency_weight = 1.0

    def __init__(self, **kwargs) -> None:
        super().__init__(**kwargs)
        self.last_cycle_trace: Optional[CycleBatchTrace] = None

    def consistency_active(self, *, epoch: int) -> bool:
        return self.config.train.consistency_enabled and epoch >= self.config.train.consistency_start_epoch

    def example_loss_terms(self, *, example: MultimodalExample, epoch: int) -> List[LossTerm]:
        terms = super().example_loss_terms(example=example, epoch=epoch)
        if not self.consistency_active(epoch=epoch) or not example.question:
            return terms

        generated_answer = self.greedy_text(example=example, task=example.task)
        if not generated_answer:
            self.skipped_consistency += 1
            self.logger.debug(f"example {example.example_id}: empty generated answer, consistency terms skipped")
            return terms
        generated_question = self.greedy_text(example=example, task=TaskToken.QUESTION, drop_question=True, extra_segments=(generated_answer,))
        regenerated_answer = self.greedy_text(example=example, task=example.task, question_override=generated_question)

        answer_consistency = self.answer_loss(example=example, epoch=epoch, pass_tag="answer-consistency", question_override=generated_question)
        question_consistency = self.question_loss(example=example, epoch=epoch, pass_tag="question-consistency", answer_text=generated_answer)
        terms.append(LossTerm(name="answer_consistency", loss=answer_consistency, weight=self.consistency_weight))
        terms.append(LossTerm(name="question_consistency", loss=question_consistency, weight=self.consistency_weight))

        self.last_cycle_trace = CycleBatchTrace(
            example_id=example.example_id,
            question=example.question,
            answer=example.answer,
            generated_answer=generated_answer,
            generated_question=generated_question,
            regenerated_answer=regenerated_answer,
            losses={x.name: x.loss.item() for x in terms},
        )
        self.logger.debug(self.last_cycle_trace)
        return terms
