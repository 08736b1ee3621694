from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from modal_to_text.config import HISTORY_INPUT, QUESTION_INPUT, SPEECH_INPUT, ModelConfig
from modal_to_text.dataset import MultimodalExample
from modal_to_text.tensor import (
    Tensor,
    add,
    attention,
    concatenate,
    cross_entropy,
    dropout,
    gather_rows,
    layer_norm,
    matmul,
    mean_rows,
    relu,
    reshape,
    softmax,
)
from modal_to_text.text import TaskToken, TextTokenizer
from modal_to_text.tokenization import GumbelMode, ModalityChannel, SampledCategories, tokenize_channel
from modal_to_text.utility import DimensionError, Logger, LoggerApi, LogLevel, create_rng


@dataclass(frozen=True, kw_only=True)
class ModelInput:
    task: TaskToken
    features: Mapping[str, np.ndarray] = field(default_factory=dict)
    text_segments: Tuple[str, ...] = ()
    candidates: Tuple[str, ...] = ()


def create_model_input(
    example: MultimodalExample,
    *,
    task: Optional[TaskToken] = None,
    question_override: Optional[str] = None,
    drop_question: bool = False,
    extra_segments: Sequence[str] = (),
    include_candidates: bool = True,
    active_inputs: Optional[Sequence[str]] = None,
) -> ModelInput:
    """
    Select what the encoder sees for one pass over `example`. Text segments keep the order
    question, history, speech, then `extra_segments`; empty segments are left out. Candidates are
    only ever attached to answer-task inputs.
    """

    def active(name):
        return active_inputs is None or name in active_inputs

    task = task or example.task
    question = question_override if question_override is not None else example.question
    segments = []
    if question and active(QUESTION_INPUT) and not drop_question:
        segments.append(question)
    if example.history and active(HISTORY_INPUT):
        segments.append(example.history)
    if example.speech and active(SPEECH_INPUT):
        segments.append(example.speech)
    segments.extend(x for x in extra_segments if x)
    return ModelInput(
        task=task,
        features={key: value for key, value in example.features.items() if active(key)},
        text_segments=tuple(segments),
        candidates=tuple(example.candidates) if include_candidates and task == TaskToken.ANSWER else (),
    )


def sinusoidal_positions(*, length: int, width: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(width) // 2)) / width)
    angles = positions * rates[None, :]
    return np.where(np.arange(width) % 2 == 0, np.sin(angles), np.cos(angles))


class EncoderDecoderModel:
    """
    Pre-norm transformer encoder-decoder over a shared token-embedding table. The encoder consumes
    assembled embedding sequences; the decoder starts from the pad token as its begin-of-sequence
    input.
    """

    def __init__(self, *, config: ModelConfig, tokenizer: TextTokenizer, rng: np.random.Generator, logger: Optional[LoggerApi] = None) -> None:
        self.config = config
        self.tokenizer = tokenizer
        self.dtype = np.dtype(config.dtype)
        self.logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
        self.vocabulary_size = tokenizer.vocabulary_size
        self._parameters: Dict[str, Tensor] = {}
        self._encoder_parameter_names: List[str] = []

        width = config.model_width
        self._add_weight(name="token_embedding", shape=(self.vocabulary_size, config.embedding_width), fan_in=config.embedding_width, rng=rng, encoder=True)
        if config.embedding_width != width:
            self._add_weight(name="input_projection.weight", shape=(config.embedding_width, width), fan_in=config.embedding_width, rng=rng, encoder=True)
            self._add_zeros(name="input_projection.bias", shape=(width,), encoder=True)
        for i in range(config.encoder_layers):
            prefix = f"encoder.{i}"
            self._add_norm(name=f"{prefix}.attention_norm", encoder=True)
            self._add_attention(prefix=f"{prefix}.self_attention", rng=rng, encoder=True)
            self._add_norm(name=f"{prefix}.feed_forward_norm", encoder=True)
            self._add_feed_forward(prefix=f"{prefix}.feed_forward", rng=rng, encoder=True)
        self._add_norm(name="encoder.final_norm", encoder=True)
        for i in range(config.decoder_layers):
            prefix = f"decoder.{i}"
            self._add_norm(name=f"{prefix}.self_attention_norm")
            self._add_attention(prefix=f"{prefix}.self_attention", rng=rng)
            self._add_norm(name=f"{prefix}.cross_attention_norm")
            self._add_attention(prefix=f"{prefix}.cross_attention", rng=rng)
            self._add_norm(name=f"{prefix}.feed_forward_norm")
            self._add_feed_forward(prefix=f"{prefix}.feed_forward", rng=rng)
        self._add_norm(name="decoder.final_norm")
        self._add_weight(name="output_projection.weight", shape=(width, self.vocabulary_size), fan_in=width, rng=rng)
        self._add_zeros(name="output_projection.bias", shape=(self.vocabulary_size,))

    def _register(self, *, name, data, encoder):
        self._parameters[name] = Tensor(data, requires_grad=True, dtype=self.dtype, name=name)
        if encoder:
            self._encoder_parameter_names.append(name)

    def _add_weight(self, *, name, shape, fan_in, rng, encoder=False):
        bound = 1.0 / np.sqrt(fan_in)
        self._register(name=name, data=rng.uniform(-bound, bound, shape), encoder=encoder)

    def _add_zeros(self, *, name, shape, encoder=False):
        self._register(name=name, data=np.zeros(shape), encoder=encoder)

    def _add_norm(self, *, name, encoder=False):
        self._register(name=f"{name}.gain", data=np.ones(self.config.model_width), encoder=encoder)
        self._register(name=f"{name}.bias", data=np.zeros(self.config.model_width), encoder=encoder)

    def _add_attention(self, *, prefix, rng, encoder=False):
        width = self.config.model_width
        for projection in ("query", "key", "value", "output"):
            self._add_weight(name=f"{prefix}.{projection}_weight", shape=(width, width), fan_in=width, rng=rng, encoder=encoder)
            self._add_zeros(name=f"{prefix}.{projection}_bias", shape=(width,), encoder=encoder)

    def _add_feed_forward(self, *, prefix, rng, encoder=False):
        width, hidden = self.config.model_width, self.config.feed_forward_width
        self._add_weight(name=f"{prefix}.input_weight", shape=(width, hidden), fan_in=width, rng=rng, encoder=encoder)
        self._add_zeros(name=f"{prefix}.input_bias", shape=(hidden,), encoder=encoder)
        self._add_weight(name=f"{prefix}.output_weight", shape=(hidden, width), fan_in=hidden, rng=rng, encoder=encoder)
        self._add_zeros(name=f"{prefix}.output_bias", shape=(width,), encoder=encoder)

    def parameters(self) -> Dict[str, Tensor]:
        return {f"model.{key}": value for key, value in self._parameters.items()}

    def encoder_parameters(self) -> Dict[str, Tensor]:
        return {f"model.{key}": self._parameters[key] for key in self._encoder_parameter_names}

    def parameter(self, name: str) -> Tensor:
        return self._parameters[name]

    @property
    def token_embedding(self) -> Tensor:
        return self._parameters["token_embedding"]

    def embed_tokens(self, ids: Sequence[int]) -> Tensor:
        return gather_rows(self.token_embedding, list(ids))

    def _norm(self, name, x):
        return layer_norm(x, self._parameters[f"{name}.gain"], self._parameters[f"{name}.bias"], self.config.layer_norm_epsilon)

    def _linear(self, name, x):
        return add(matmul(x, self._parameters[f"{name}_weight"]), self._parameters[f"{name}_bias"])

    def _attention(self, prefix, query_source, key_source, *, causal):
        query = self._linear(f"{prefix}.query", query_source)
        key = self._linear(f"{prefix}.key", key_source)
        value = self._linear(f"{prefix}.value", key_source)
        return self._linear(f"{prefix}.output", attention(query, key, value, num_heads=self.config.heads, causal=causal))

    def _feed_forward(self, prefix, x):
        return self._linear(f"{prefix}.output", relu(self._linear(f"{prefix}.input", x)))

    def _to_model_width(self, embeddings: Tensor) -> Tensor:
        if embeddings.data.ndim != 2 or embeddings.shape[1] != self.config.embedding_width:
            raise DimensionError(f"expected L x {self.config.embedding_width} embeddings, got {embeddings.shape}")
        x = embeddings
        if self.config.embedding_width != self.config.model_width:
            x = add(matmul(x, self._parameters["input_projection.weight"]), self._parameters["input_projection.bias"])
        if self.config.positional_encoding:
            x = add(x, Tensor(sinusoidal_positions(length=x.shape[0], width=self.config.model_width), dtype=self.dtype))
        return x

    def encode(self, embeddings: Tensor, *, rng: Optional[np.random.Generator] = None) -> Tensor:
        if embeddings.shape[0] < 1:
            raise DimensionError("cannot encode an empty sequence")
        rate = self.config.dropout
        x = self._to_model_width(embeddings)
        for i in range(self.config.encoder_layers):
            prefix = f"encoder.{i}"
            h = self._norm(f"{prefix}.attention_norm", x)
            x = add(x, dropout(self._attention(f"{prefix}.self_attention", h, h, causal=False), rate=rate, rng=rng))
            h = self._norm(f"{prefix}.feed_forward_norm", x)
            x = add(x, dropout(self._feed_forward(f"{prefix}.feed_forward", h), rate=rate, rng=rng))
        return self._norm("encoder.final_norm", x)

    def decode(self, z: Tensor, input_ids: Sequence[int], *, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Per-position next-token distributions for the decoder inputs `input_ids`, n x T'."""
        if any(not 0 <= x < self.vocabulary_size for x in input_ids):
            raise ValueError(f"decoder history {list(input_ids)} contains ids outside the vocabulary of size {self.vocabulary_size}")
        rate = self.config.dropout
        x = self._to_model_width(self.embed_tokens(input_ids))
        for i in range(self.config.decoder_layers):
            prefix = f"decoder.{i}"
            h = self._norm(f"{prefix}.self_attention_norm", x)
            x = add(x, dropout(self._attention(f"{prefix}.self_attention", h, h, causal=True), rate=rate, rng=rng))
            h = self._norm(f"{prefix}.cross_attention_norm", x)
            x = add(x, dropout(self._attention(f"{prefix}.cross_attention", h, z, causal=False), rate=rate, rng=rng))
            h = self._norm(f"{prefix}.feed_forward_norm", x)
            x = add(x, dropout(self._feed_forward(f"{prefix}.feed_forward", h), rate=rate, rng=rng))
        h = self._norm("decoder.final_norm", x)
        return softmax(add(matmul(h, self._parameters["output_projection.weight"]), self._parameters["output_projection.bias"]))

    def forward_teacher_forced(self, z: Tensor, gold_ids: Sequence[int], *, rng: Optional[np.random.Generator] = None) -> Tensor:
        if len(gold_ids) < 1:
            raise ValueError("teacher forcing needs a non-empty gold sequence")
        return self.decode(z, [self.tokenizer.pad_id] + list(gold_ids[:-1]), rng=rng)

    def decode_step(self, z: Tensor, history: Sequence[int]) -> np.ndarray:
        return self.decode(z, [self.tokenizer.pad_id] + list(history)).data[-1]


class ClassificationHead:
    """Affine head over the mean-pooled encoder output, one logit per candidate position."""

    def __init__(self, *, model_width: int, candidate_count: int, rng: np.random.Generator, dtype=np.float64) -> None:
        bound = 1.0 / np.sqrt(model_width)
        self.candidate_count = candidate_count
        self.weight = Tensor(rng.uniform(-bound, bound, (model_width, candidate_count)), requires_grad=True, dtype=dtype, name="head.weight")
        self.bias = Tensor(np.zeros(candidate_count), requires_grad=True, dtype=dtype, name="head.bias")

    def parameters(self) -> Dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def probabilities(self, z: Tensor) -> Tensor:
        pooled = reshape(mean_rows(z), (1, z.shape[1]))
        return softmax(add(matmul(pooled, self.weight), self.bias))


@dataclass(kw_only=True)
class MultimodalSystem:
    tokenizer: TextTokenizer
    model: EncoderDecoderModel
    channels: List[ModalityChannel]
    head: Optional[ClassificationHead] = None

    def parameters(self) -> Dict[str, Tensor]:
        result = dict(self.model.parameters())
        for channel in self.channels:
            result.update(channel.parameters())
        if self.head is not None:
            result.update(self.head.parameters())
        return result

    def channel(self, name: str) -> ModalityChannel:
        for x in self.channels:
            if x.name == name:
                return x
        raise KeyError(name)


def assemble_input(*, model_input: ModelInput, channel_embeddings: Sequence[Tensor], model: EncoderDecoderModel) -> Tensor:
    """
    [task, (sep, channel block)*, (text segment, sep)*, (sep, candidate)*] as one L x D sequence.
    """
    if not channel_embeddings and not model_input.text_segments and not model_input.candidates:
        raise ValueError("cannot assemble an input with no modalities, text segments or candidates")
    tokenizer = model.tokenizer
    separator = [tokenizer.separator_id]
    pieces = [model.embed_tokens([tokenizer.task_id(task=model_input.task)])]
    for embeddings in channel_embeddings:
        pieces.append(model.embed_tokens(separator))
        pieces.append(embeddings)
    for segment in model_input.text_segments:
        pieces.append(model.embed_tokens(tokenizer.tokenize(segment) + separator))
    for candidate in model_input.candidates:
        pieces.append(model.embed_tokens(separator + tokenizer.tokenize(candidate)))
    return concatenate(pieces, axis=0)


def assembled_length(*, model_input: ModelInput, channels: Sequence[ModalityChannel], tokenizer: TextTokenizer) -> int:
    length = 1
    length += sum(x.output_length + 1 for x in channels if x.name in model_input.features)
    length += sum(len(tokenizer.tokenize(x)) + 1 for x in model_input.text_segments)
    length += sum(len(tokenizer.tokenize(x)) + 1 for x in model_input.candidates)
    return length


@dataclass(frozen=True, kw_only=True)
class EncodedInput:
    z: Tensor
    length: int
    sampled: Dict[str, SampledCategories]


def is_training_mode(mode: GumbelMode) -> bool:
    return mode == GumbelMode.TRAIN_SAMPLE


def encode_input(
    *, model_input: ModelInput, model: EncoderDecoderModel, channels: Sequence[ModalityChannel], mode: GumbelMode, seed_parts: Tuple = ()
) -> EncodedInput:
    """
    Tokenization path per channel, assembly and encoding. In train-sample mode every channel draws
    its Gumbel noise from an rng derived from `seed_parts` and its own name.
    """
    channel_embeddings = []
    sampled = {}
    for channel in channels:
        features = model_input.features.get(channel.name)
        if features is None:
            continue
        rng = create_rng(*seed_parts, "gumbel", channel.name) if is_training_mode(mode) else None
        embeddings, selection = tokenize_channel(channel=channel, features=features, mode=mode, rng=rng)
        channel_embeddings.append(embeddings)
        if selection is not None:
            sampled[channel.name] = selection
    embeddings = assemble_input(model_input=model_input, channel_embeddings=channel_embeddings, model=model)
    dropout_rng = create_rng(*seed_parts, "encoder-dropout") if is_training_mode(mode) and model.config.dropout > 0 else None
    z = model.encode(embeddings, rng=dropout_rng)
    return EncodedInput(z=z, length=embeddings.shape[0], sampled=sampled)


def target_loss(*, z: Tensor, target_ids: Sequence[int], model: EncoderDecoderModel, rng: Optional[np.random.Generator] = None) -> Tensor:
    # pad positions in the target are masked out of the mean
    probabilities = model.forward_teacher_forced(z, target_ids, rng=rng)
    mask = [x != model.tokenizer.pad_id for x in target_ids]
    return cross_entropy(probabilities, list(target_ids), mask)


def sequence_loss(
    *,
    model_input: ModelInput,
    target_ids: Sequence[int],
    model: EncoderDecoderModel,
    channels: Sequence[ModalityChannel],
    mode: GumbelMode,
    seed_parts: Tuple = (),
) -> Tensor:
    encoded = encode_input(model_input=model_input, model=model, channels=channels, mode=mode, seed_parts=seed_parts)
    dropout_rng = create_rng(*seed_parts, "decoder-dropout") if is_training_mode(mode) and model.config.dropout > 0 else None
    return target_loss(z=encoded.z, target_ids=target_ids, model=model, rng=dropout_rng)


def candidate_loss(
    *,
    model_input: ModelInput,
    gold_index: int,
    head: ClassificationHead,
    model: EncoderDecoderModel,
    channels: Sequence[ModalityChannel],
    mode: GumbelMode,
    seed_parts: Tuple = (),
) -> Tensor:
    if len(model_input.candidates) != head.candidate_count:
        raise DimensionError(f"head scores {head.candidate_count} candidates, input has {len(model_input.candidates)}")
    encoded = encode_input(model_input=model_input, model=model, channels=channels, mode=mode, seed_parts=seed_parts)
    return cross_entropy(head.probabilities(encoded.z), [gold_index])
