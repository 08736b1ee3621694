from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from modal_to_text.text import TaskToken
from modal_to_text.utility import ConfigError, json_deserialize, json_serialize

DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True, kw_only=True)
class MultimodalExample:
    example_id: str
    task: TaskToken
    # target text for the example's own task
    answer: str
    features: Mapping[str, np.ndarray] = field(default_factory=dict)
    question: Optional[str] = None
    history: Optional[str] = None
    speech: Optional[str] = None
    candidates: Tuple[str, ...] = ()
    gold_candidate_index: Optional[int] = None
    latent_categories: Mapping[str, int] = field(default_factory=dict)
    question_type: Optional[str] = None

    def __post_init__(self):
        if not self.features and not any((self.question, self.history, self.speech)):
            raise ValueError(f"example {self.example_id} has neither a text segment nor a modality")
        if self.candidates and (self.gold_candidate_index is None or not 0 <= self.gold_candidate_index < len(self.candidates)):
            raise ValueError(f"example {self.example_id}: gold candidate index {self.gold_candidate_index} invalid for {len(self.candidates)} candidates")

    def texts(self) -> List[str]:
        return [x for x in (self.question, self.history, self.speech, self.answer) if x] + list(self.candidates)

    def as_readable_dict(self):
        return {
            "example_id": self.example_id,
            "task": str(self.task),
            "question": self.question,
            "history": self.history,
            "speech": self.speech,
            "answer": self.answer,
            "candidates": self.candidates,
            "latent_categories": dict(self.latent_categories),
        }


def example_to_record(example: MultimodalExample) -> Dict:
    return {
        "schema_version": DATASET_SCHEMA_VERSION,
        "id": example.example_id,
        "task": example.task.value,
        "features": {key: np.asarray(value).tolist() for key, value in example.features.items()},
        "question": example.question,
        "history": example.history,
        "speech": example.speech,
        "answer": example.answer,
        "candidates": list(example.candidates),
        "gold_candidate_index": example.gold_candidate_index,
        "latent_categories": dict(example.latent_categories),
        "question_type": example.question_type,
    }


def example_from_record(record: Dict) -> MultimodalExample:
    version = record.get("schema_version")
    if version != DATASET_SCHEMA_VERSION:
        raise ConfigError(f"Unsupported dataset schema version {version}, expected {DATASET_SCHEMA_VERSION}")
    return MultimodalExample(
        example_id=record["id"],
        task=TaskToken(record["task"]),
        features={key: np.asarray(value, dtype=np.float64) for key, value in record["features"].items()},
        question=record.get("question"),
        history=record.get("history"),
        speech=record.get("speech"),
        answer=record["answer"],
        candidates=tuple(record.get("candidates") or ()),
        gold_candidate_index=record.get("gold_candidate_index"),
        latent_categories=dict(record.get("latent_categories") or {}),
        question_type=record.get("question_type"),
    )


def write_examples(*, path: str, examples: Iterable[MultimodalExample]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        for example in examples:
            f.write(json_serialize(example_to_record(example)))
            f.write("\n")


def read_examples(*, path: str) -> List[MultimodalExample]:
    if not os.path.exists(path):
        raise ConfigError(f"dataset file {path} does not exist; run gen-data first")
    examples = []
    with open(path, "rb") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                examples.append(example_from_record(json_deserialize(line)))
            except (KeyError, ValueError) as exception:
                raise ConfigError(f"{path}:{line_number}: malformed example record: {exception}") from exception
    return examples
