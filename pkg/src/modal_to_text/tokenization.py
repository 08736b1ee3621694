"""
Differentiable tokenization of modality signals.

A `ModalityChannel` turns a raw feature vector into K*T embedding vectors that live in the same
space as text-token embeddings:

- differentiable: Gumbel-perturbed top-K categories, hard one-hot gather forward, soft
  straight-through gradient backward into both the embedding table and the classifier
- frozen: deterministic top-K, no gradient into the classifier
- feature-embed: fully connected map of the class distribution followed by layer normalization
"""

from __future__ import annotations

try:
    from enum import StrEnum
except ImportError:
    from strenum import StrEnum  # type: ignore

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from modal_to_text.config import ChannelConfig, TokenizationPath
from modal_to_text.tensor import (
    Tensor,
    add,
    concatenate,
    gather_rows,
    layer_norm,
    log,
    matmul,
    reshape,
    softmax,
    straight_through_matmul,
)
from modal_to_text.text import TextTokenizer
from modal_to_text.utility import DimensionError, Logger, LoggerApi, LogLevel, SelectionError

PROBABILITY_FLOOR = 1e-12
UNIFORM_CLAMP = 1e-12


class GumbelMode(StrEnum):
    TRAIN_SAMPLE = "train-sample"
    EVAL_DETERMINISTIC = "eval-deterministic"


@dataclass(frozen=True, kw_only=True)
class GumbelConfig:
    temperature: float = 1.0
    mode: GumbelMode = GumbelMode.TRAIN_SAMPLE
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"Gumbel temperature must be positive, got {self.temperature}")


@dataclass(frozen=True, kw_only=True)
class SampledCategories:
    indices: Tuple[int, ...]
    scores: Tuple[float, ...]
    probabilities: Tuple[float, ...]
    # the full perturbation vector over all C categories, zeros in eval-deterministic mode
    noise: np.ndarray

    def as_readable_dict(self):
        return {"indices": self.indices, "scores": self.scores, "probabilities": self.probabilities}


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    clamped = np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(clamped))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    return gumbel_from_uniform(rng.random(shape))


def floored_log(probabilities: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(probabilities, PROBABILITY_FLOOR))


def rank_perturbed_scores(*, probabilities: np.ndarray, noise: np.ndarray, sample_count: int) -> np.ndarray:
    """
    Indices of the `sample_count` largest perturbed scores log p + noise, ordered by score
    descending, lowest index first on ties. `noise` may carry leading batch dimensions; each row is
    ranked independently. Zero-probability categories are never selected.
    """
    scores = floored_log(probabilities) + noise
    scores = np.where(probabilities > 0, scores, -np.inf)
    return np.argsort(-scores, axis=-1, kind="stable")[..., :sample_count]


def validate_distribution(*, probabilities: np.ndarray, sample_count: int) -> None:
    if probabilities.ndim != 1 or probabilities.size < 1:
        raise DimensionError(f"expected a category distribution vector, got shape {probabilities.shape}")
    if not np.all(np.isfinite(probabilities)) or np.any(probabilities < 0) or abs(float(probabilities.sum()) - 1.0) > 1e-6:
        raise ValueError("probabilities must be a valid distribution (non-negative, summing to 1)")
    if not 1 <= sample_count <= probabilities.size:
        raise ValueError(f"sample count K={sample_count} must satisfy 1 <= K <= C={probabilities.size}")
    nonzero = int(np.count_nonzero(probabilities))
    if sample_count > nonzero:
        raise SelectionError(f"cannot select K={sample_count} distinct categories: only {nonzero} have nonzero probability")


def perturb_topk(
    *, probabilities: np.ndarray, sample_count: int, config: GumbelConfig, rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None
) -> SampledCategories:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    validate_distribution(probabilities=probabilities, sample_count=sample_count)
    if config.mode == GumbelMode.EVAL_DETERMINISTIC:
        noise = np.zeros_like(probabilities)
    elif noise is None:
        if rng is None:
            if config.seed is None:
                raise ValueError("train-sample mode needs an rng, explicit noise or a seed")
            rng = np.random.Generator(np.random.PCG64(config.seed))
        noise = gumbel_noise(probabilities.shape, rng)
    indices = rank_perturbed_scores(probabilities=probabilities, noise=noise, sample_count=sample_count)
    scores = floored_log(probabilities) + noise
    return SampledCategories(
        indices=tuple(int(x) for x in indices),
        scores=tuple(float(scores[x]) for x in indices),
        probabilities=tuple(float(probabilities[x]) for x in indices),
        noise=noise,
    )


class ModalityChannel:
    def __init__(
        self,
        *,
        config: ChannelConfig,
        category_names: Sequence[str],
        tokenizer: TextTokenizer,
        embedding_table: np.ndarray,
        rng: np.random.Generator,
        dtype=np.float64,
        logger: Optional[LoggerApi] = None,
    ) -> None:
        if len(category_names) != config.category_count:
            raise DimensionError(f"channel {config.name}: {len(category_names)} category names for C={config.category_count}")
        self.config = config
        self.name = config.name
        self.category_names = list(category_names)
        self.logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)

        name_length = config.name_length
        rows = []
        for category_name in self.category_names:
            ids = tokenizer.tokenize(category_name)
            if len(ids) > name_length:
                raise DimensionError(f"category name {category_name!r} has {len(ids)} tokens, more than T={name_length}")
            rows.append(ids + [tokenizer.pad_id] * (name_length - len(ids)))
        self.name_token_ids = np.asarray(rows, dtype=np.int64)

        width = embedding_table.shape[1]
        self.embedding_width = width
        bound = 1.0 / np.sqrt(config.feature_width)
        self.classifier_weight = Tensor(
            rng.uniform(-bound, bound, (config.feature_width, config.category_count)), requires_grad=True, dtype=dtype, name=f"{self.name}.classifier_weight"
        )
        self.classifier_bias = Tensor(np.zeros(config.category_count), requires_grad=True, dtype=dtype, name=f"{self.name}.classifier_bias")
        self.embedding_weight = Tensor(
            embedding_table[self.name_token_ids].reshape(config.category_count, name_length * width),
            requires_grad=True,
            dtype=dtype,
            name=f"{self.name}.embedding_weight",
        )
        self.feature_embed_parameters: Dict[str, Tensor] = {}
        if config.path == TokenizationPath.FEATURE_EMBED:
            output_width = config.sample_count * name_length * width
            fc_bound = 1.0 / np.sqrt(config.category_count)
            self.feature_embed_parameters = {
                "fc_weight": Tensor(rng.uniform(-fc_bound, fc_bound, (config.category_count, output_width)), requires_grad=True, dtype=dtype),
                "fc_bias": Tensor(np.zeros(output_width), requires_grad=True, dtype=dtype),
                "norm_gain": Tensor(np.ones(width), requires_grad=True, dtype=dtype),
                "norm_bias": Tensor(np.zeros(width), requires_grad=True, dtype=dtype),
            }
            for key, tensor in self.feature_embed_parameters.items():
                tensor.name = f"{self.name}.{key}"

    @property
    def path(self) -> TokenizationPath:
        return self.config.path

    @property
    def output_length(self) -> int:
        return self.config.sample_count * self.config.name_length

    def parameters(self) -> Dict[str, Tensor]:
        result = {
            f"{self.name}.classifier_weight": self.classifier_weight,
            f"{self.name}.classifier_bias": self.classifier_bias,
            f"{self.name}.embedding_weight": self.embedding_weight,
        }
        result.update({f"{self.name}.{key}": value for key, value in self.feature_embed_parameters.items()})
        return result

    def trainable_parameters(self) -> Dict[str, Tensor]:
        parameters = self.parameters()
        if self.path == TokenizationPath.FROZEN:
            parameters.pop(f"{self.name}.classifier_weight")
            parameters.pop(f"{self.name}.classifier_bias")
        return parameters

    def classifier_probabilities(self, features: Tensor) -> Tensor:
        if features.data.ndim != 2 or features.shape[1] != self.config.feature_width:
            raise DimensionError(f"channel {self.name}: features of shape {features.shape}, expected n x {self.config.feature_width}")
        return softmax(add(matmul(features, self.classifier_weight), self.classifier_bias))

    def classifier_probability_array(self, features: np.ndarray) -> np.ndarray:
        logits = np.atleast_2d(features) @ self.classifier_weight.data + self.classifier_bias.data
        exponentials = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return exponentials / exponentials.sum(axis=-1, keepdims=True)

    def predict_categories(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.classifier_probability_array(features), axis=-1)

    def one_hot(self, indices: Sequence[int]) -> np.ndarray:
        hard = np.zeros((len(indices), self.config.category_count), dtype=self.embedding_weight.dtype)
        hard[np.arange(len(indices)), list(indices)] = 1.0
        return hard


def as_feature_tensor(*, features: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(features, dtype=dtype).reshape(1, -1))


def soft_selection(*, probabilities: Tensor, noise: np.ndarray, temperature: float) -> Tensor:
    # softmax((log p + g) / temperature) over one row of categories
    return softmax(add(log(probabilities, floor=PROBABILITY_FLOOR), Tensor(noise.reshape(1, -1))), temperature=temperature)


def straight_through_embed(*, channel: ModalityChannel, probabilities: Tensor, sampled: SampledCategories, temperature: float) -> Tensor:
    """
    Embeddings of the sampled categories, (K*T) x D. The forward value is the hard one-hot gather
    from the channel's embedding table; gradients are those of the soft selection vector repeated
    for every sampled row, so both the table and the classifier receive them.
    """
    if not temperature > 0:
        raise ValueError(f"straight-through temperature must be positive, got {temperature}")
    if any(not 0 <= x < channel.config.category_count for x in sampled.indices):
        raise DimensionError(f"sampled indices {sampled.indices} invalid for channel {channel.name} with C={channel.config.category_count}")
    soft = soft_selection(probabilities=probabilities, noise=sampled.noise, temperature=temperature)
    soft_rows = concatenate([soft] * len(sampled.indices), axis=0)
    output = straight_through_matmul(channel.one_hot(sampled.indices), soft_rows, channel.embedding_weight)
    return reshape(output, (len(sampled.indices) * channel.config.name_length, channel.embedding_width))


def soft_surrogate_embed(*, channel: ModalityChannel, probabilities: Tensor, sampled: SampledCategories, temperature: float) -> Tensor:
    # the relaxed computation whose gradient the straight-through bridge reproduces
    soft = soft_selection(probabilities=probabilities, noise=sampled.noise, temperature=temperature)
    soft_rows = concatenate([soft] * len(sampled.indices), axis=0)
    output = matmul(soft_rows, channel.embedding_weight)
    return reshape(output, (len(sampled.indices) * channel.config.name_length, channel.embedding_width))


def differentiable_tokenize(
    *, channel: ModalityChannel, features: np.ndarray, mode: GumbelMode, rng: Optional[np.random.Generator] = None
) -> Tuple[Tensor, SampledCategories]:
    probabilities = channel.classifier_probabilities(as_feature_tensor(features=features, dtype=channel.classifier_weight.dtype))
    sampled = perturb_topk(
        probabilities=probabilities.data[0],
        sample_count=channel.config.sample_count,
        config=GumbelConfig(temperature=channel.config.temperature, mode=mode),
        rng=rng,
    )
    embeddings = straight_through_embed(channel=channel, probabilities=probabilities, sampled=sampled, temperature=channel.config.temperature)
    return embeddings, sampled


def frozen_tokenize(*, channel: ModalityChannel, features: np.ndarray) -> Tuple[Tensor, SampledCategories]:
    probabilities = channel.classifier_probability_array(np.asarray(features, dtype=channel.classifier_weight.dtype))[0]
    sampled = perturb_topk(
        probabilities=probabilities,
        sample_count=channel.config.sample_count,
        config=GumbelConfig(temperature=channel.config.temperature, mode=GumbelMode.EVAL_DETERMINISTIC),
    )
    embeddings = gather_rows(channel.embedding_weight, list(sampled.indices))
    return reshape(embeddings, (channel.output_length, channel.embedding_width)), sampled


def feature_embed(*, channel: ModalityChannel, features: np.ndarray) -> Tensor:
    if not channel.feature_embed_parameters:
        raise DimensionError(f"channel {channel.name} was built without feature-embed parameters (path {channel.path})")
    parameters = channel.feature_embed_parameters
    probabilities = channel.classifier_probabilities(as_feature_tensor(features=features, dtype=channel.classifier_weight.dtype))
    hidden = add(matmul(probabilities, parameters["fc_weight"]), parameters["fc_bias"])
    hidden = reshape(hidden, (channel.output_length, channel.embedding_width))
    return layer_norm(hidden, parameters["norm_gain"], parameters["norm_bias"])


def tokenize_channel(
    *, channel: ModalityChannel, features: np.ndarray, mode: GumbelMode, rng: Optional[np.random.Generator] = None
) -> Tuple[Tensor, Optional[SampledCategories]]:
    """Dispatch on the channel's path. Returns the (K*T) x D embeddings and the selection, if any."""
    if channel.path == TokenizationPath.DIFFERENTIABLE:
        return differentiable_tokenize(channel=channel, features=features, mode=mode, rng=rng)
    elif channel.path == TokenizationPath.FROZEN:
        return frozen_tokenize(channel=channel, features=features)
    elif channel.path == TokenizationPath.FEATURE_EMBED:
        return feature_embed(channel=channel, features=features), None
    else:
        raise ValueError(f"Unsupported tokenization path {channel.path}")
