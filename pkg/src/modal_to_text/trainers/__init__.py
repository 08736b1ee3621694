from modal_to_text.config import TrainingRegime
from modal_to_text.trainer_api import Trainer
from modal_to_text.trainers.cycle import CycleTrainer
from modal_to_text.trainers.discriminative import DiscriminativeTrainer
from modal_to_text.trainers.qa import QaTrainer
from modal_to_text.trainers.qa_qg import QaQgTrainer

TRAINER_CLASSES = {
    TrainingRegime.QA: QaTrainer,
    TrainingRegime.QA_QG: QaQgTrainer,
    TrainingRegime.CYCLE: CycleTrainer,
    TrainingRegime.DISCRIMINATIVE: DiscriminativeTrainer,
}


def create_trainer(*, regime: TrainingRegime, **kwargs) -> Trainer:
    try:
        trainer_class = TRAINER_CLASSES[regime]
    except KeyError as exception:
        raise ValueError(f"Unsupported training regime {regime}") from exception
    return trainer_class(**kwargs)
