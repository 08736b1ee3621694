from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from modal_to_text.config import EvaluationMode, ExperimentConfig
from modal_to_text.dataset import MultimodalExample
from modal_to_text.decoding import CandidateScore, generate, score_candidates
from modal_to_text.metrics import MetricReport, generation_report, mean
from modal_to_text.seq2seq import MultimodalSystem, create_model_input, encode_input
from modal_to_text.tensor import no_grad
from modal_to_text.tokenization import GumbelMode
from modal_to_text.utility import Logger, LoggerApi, LogLevel


@dataclass(frozen=True, kw_only=True)
class GenerationRecord:
    example_id: str
    text: str
    reference: str
    speech: Optional[str] = None
    sampled_categories: Mapping[str, Tuple[int, ...]] = field(default_factory=dict)


@dataclass(frozen=True, kw_only=True)
class ScoreRecord:
    example_id: str
    selected_index: int
    gold_index: Optional[int]
    scores: Tuple[CandidateScore, ...]
    head_index: Optional[int] = None


def generate_split(
    *, system: MultimodalSystem, examples: Sequence[MultimodalExample], config: ExperimentConfig, logger: Optional[LoggerApi] = None
) -> List[GenerationRecord]:
    logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
    records = []
    with no_grad():
        for example in examples:
            model_input = create_model_input(example, include_candidates=config.decode.candidates_in_input, active_inputs=config.active_inputs)
            tokens, encoded = generate(model_input=model_input, model=system.model, channels=system.channels, config=config.decode)
            text = system.tokenizer.detokenize(tokens)
            if not text:
                logger.warning(f"example {example.example_id}: empty generation")
            records.append(
                GenerationRecord(
                    example_id=example.example_id,
                    text=text,
                    reference=example.answer,
                    speech=example.speech,
                    sampled_categories={key: value.indices for key, value in encoded.sampled.items()},
                )
            )
            logger.trace(example.example_id, text)
    return records


def score_split(
    *, system: MultimodalSystem, examples: Sequence[MultimodalExample], config: ExperimentConfig, logger: Optional[LoggerApi] = None
) -> List[ScoreRecord]:
    logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
    records = []
    with no_grad():
        for example in examples:
            if len(example.candidates) < 2:
                continue
            model_input = create_model_input(example, include_candidates=config.decode.candidates_in_input, active_inputs=config.active_inputs)
            selected, scores = score_candidates(model_input=model_input, candidates=example.candidates, model=system.model, channels=system.channels)
            head_index = None
            if system.head is not None and len(example.candidates) == system.head.candidate_count:
                head_input = create_model_input(example, include_candidates=True, active_inputs=config.active_inputs)
                encoded = encode_input(model_input=head_input, model=system.model, channels=system.channels, mode=GumbelMode.EVAL_DETERMINISTIC)
                head_index = int(np.argmax(system.head.probabilities(encoded.z).data[0]))
            records.append(
                ScoreRecord(
                    example_id=example.example_id, selected_index=selected, gold_index=example.gold_candidate_index, scores=tuple(scores), head_index=head_index
                )
            )
    if not records:
        logger.warning("no example in the split carries candidates; nothing was scored")
    return records


def evaluate(
    *,
    system: MultimodalSystem,
    examples: Sequence[MultimodalExample],
    mode: EvaluationMode,
    config: ExperimentConfig,
    logger: Optional[LoggerApi] = None,
) -> MetricReport:
    logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
    if mode == EvaluationMode.GENERATE:
        records = generate_split(system=system, examples=examples, config=config, logger=logger)
        report = generation_report(candidates=[x.text for x in records], references=[x.reference for x in records])
    elif mode == EvaluationMode.SCORE_CANDIDATES:
        records_scored = score_split(system=system, examples=examples, config=config, logger=logger)
        head_hits = [float(x.head_index == x.gold_index) for x in records_scored if x.head_index is not None]
        counts: Dict[str, int] = {"scored": len(records_scored)}
        if head_hits:
            counts["head_scored"] = len(head_hits)
        report = MetricReport(
            top1_accuracy=mean([float(x.selected_index == x.gold_index) for x in records_scored]),
            head_top1_accuracy=mean(head_hits),
            counts=counts,
        )
    else:
        raise ValueError(f"Unsupported evaluation mode {mode}")
    logger.info(f"evaluation ({mode}) on {len(examples)} examples", report)
    return report
