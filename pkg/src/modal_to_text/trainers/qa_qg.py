from __future__ import annotations

from typing import List

from modal_to_text.config import TrainingRegime
from modal_to_text.dataset import MultimodalExample
from modal_to_text.trainer_api import LossTerm
from modal_to_text.trainers.qa import QaTrainer


class QaQgTrainer(QaTrainer):
    """
    Answer generation plus question generation from the gold answer. The question term is left out
    when its weight is 0 or the example carries no question, which makes the objective exactly the
    answer-only one.
    """

    regime = TrainingRegime.QA_QG

    def example_loss_terms(self, *, example: MultimodalExample, epoch: int) -> List[LossTerm]:
        terms = super().example_loss_terms(example=example, epoch=epoch)
        weight = self.config.train.question_generation_weight
        if weight > 0 and example.question:
            terms.append(LossTerm(name="qg", loss=self.question_loss(example=example, epoch=epoch), weight=weight))
        return terms
