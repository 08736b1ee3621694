from __future__ import annotations

from typing import List

from modal_to_text.config import TrainingRegime
from modal_to_text.dataset import MultimodalExample
from modal_to_text.trainer_api import LossTerm, Trainer


class QaTrainer(Trainer):
    regime = TrainingRegime.QA

    def example_loss_terms(self, *, example: MultimodalExample, epoch: int) -> List[LossTerm]:
        return [LossTerm(name="qa", loss=self.answer_loss(example=example, epoch=epoch))]
