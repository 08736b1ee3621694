from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from modal_to_text.config import DecodeConfig, DecodeMethod
from modal_to_text.seq2seq import EncoderDecoderModel, ModelInput, encode_input, target_loss
from modal_to_text.tensor import Tensor
from modal_to_text.tokenization import GumbelMode, ModalityChannel


class NextTokenDecoder(Protocol):
    eos_id: int
    vocabulary_size: int

    def next_log_probabilities(self, history: Sequence[int]) -> np.ndarray: ...


class ConditionedDecoder:
    """The model's decoder bound to one encoder output."""

    def __init__(self, *, model: EncoderDecoderModel, z: Tensor) -> None:
        self.model = model
        self.z = z
        self.eos_id = model.tokenizer.eos_id
        self.vocabulary_size = model.vocabulary_size

    def next_log_probabilities(self, history: Sequence[int]) -> np.ndarray:
        probabilities = self.model.decode_step(self.z, history)
        return np.log(np.maximum(probabilities, np.finfo(probabilities.dtype).tiny))


@dataclass(frozen=True, kw_only=True)
class BeamHypothesis:
    tokens: Tuple[int, ...]
    log_probability: float
    finished: bool

    def score(self, *, length_normalization: bool) -> float:
        if length_normalization and self.tokens:
            return self.log_probability / len(self.tokens)
        return self.log_probability


@dataclass(frozen=True, kw_only=True)
class CandidateScore:
    index: int
    loss: float


def greedy_decode(*, decoder: NextTokenDecoder, max_length: int) -> List[int]:
    if max_length < 1:
        raise ValueError(f"max_length must be >= 1, got {max_length}")
    tokens: List[int] = []
    while len(tokens) < max_length:
        token = int(np.argmax(decoder.next_log_probabilities(tokens)))
        tokens.append(token)
        if token == decoder.eos_id:
            break
    return tokens


def beam_search(*, decoder: NextTokenDecoder, width: int, max_length: int, length_normalization: bool = True) -> BeamHypothesis:
    """
    Keep the `width` best expansions by accumulated log-probability at every step. Hypotheses that
    emit EOS retire to the finished pool; whatever is still open at `max_length` joins the pool
    unfinished. The pick is the best pool entry under the length-normalization rule, earliest
    retired first on ties.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    if max_length < 1:
        raise ValueError(f"max_length must be >= 1, got {max_length}")
    beams = [BeamHypothesis(tokens=(), log_probability=0.0, finished=False)]
    pool: List[BeamHypothesis] = []
    for _ in range(max_length):
        expansions = []
        for beam_index, beam in enumerate(beams):
            log_probabilities = decoder.next_log_probabilities(list(beam.tokens))
            for token, value in enumerate(log_probabilities):
                expansions.append((beam.log_probability + float(value), beam_index, token))
        expansions.sort(key=lambda x: (-x[0], x[1], x[2]))
        survivors = []
        for log_probability, beam_index, token in expansions[:width]:
            finished = token == decoder.eos_id
            hypothesis = BeamHypothesis(tokens=beams[beam_index].tokens + (token,), log_probability=log_probability, finished=finished)
            (pool if finished else survivors).append(hypothesis)
        beams = survivors
        if not beams:
            break
    pool.extend(beams)
    best = pool[0]
    for hypothesis in pool[1:]:
        if hypothesis.score(length_normalization=length_normalization) > best.score(length_normalization=length_normalization):
            best = hypothesis
    return best


def decode_tokens(*, decoder: NextTokenDecoder, config: DecodeConfig) -> List[int]:
    if config.method == DecodeMethod.GREEDY:
        return greedy_decode(decoder=decoder, max_length=config.max_length)
    elif config.method == DecodeMethod.BEAM:
        best = beam_search(decoder=decoder, width=config.beam_width, max_length=config.max_length, length_normalization=config.length_normalization)
        return list(best.tokens)
    else:
        raise ValueError(f"Unsupported decode method {config.method}")


def generate(
    *,
    model_input: ModelInput,
    model: EncoderDecoderModel,
    channels: Sequence[ModalityChannel],
    config: DecodeConfig,
    mode: GumbelMode = GumbelMode.EVAL_DETERMINISTIC,
    seed_parts: Tuple = (),
):
    """Encode `model_input` and decode it; returns the token ids and the encoded input."""
    encoded = encode_input(model_input=model_input, model=model, channels=channels, mode=mode, seed_parts=seed_parts)
    return decode_tokens(decoder=ConditionedDecoder(model=model, z=encoded.z), config=config), encoded


def score_candidates(
    *,
    model_input: ModelInput,
    candidates: Optional[Sequence[str]] = None,
    model: EncoderDecoderModel,
    channels: Sequence[ModalityChannel],
) -> Tuple[int, List[CandidateScore]]:
    """
    Mean token negative log-likelihood of every candidate (plus EOS) as the target of the
    encoded input; returns the lowest-loss index, lowest index on ties. `candidates` defaults to
    the input's own candidates; whether they are also part of the encoder input is decided by how
    `model_input` was built.
    """
    candidates = list(model_input.candidates if candidates is None else candidates)
    if len(candidates) < 2:
        raise ValueError(f"candidate scoring needs at least 2 candidates, got {len(candidates)}")
    encoded = encode_input(model_input=model_input, model=model, channels=channels, mode=GumbelMode.EVAL_DETERMINISTIC)
    scores = []
    for index, candidate in enumerate(candidates):
        loss = target_loss(z=encoded.z, target_ids=model.tokenizer.tokenize(candidate, append_eos=True), model=model)
        scores.append(CandidateScore(index=index, loss=loss.item()))
    best = min(scores, key=lambda x: (x.loss, x.index))
    return best.index, scores
