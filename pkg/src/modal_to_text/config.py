from __future__ import annotations

try:
    from enum import StrEnum
except ImportError:
    from strenum import StrEnum  # type: ignore

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from modal_to_text.utility import ConfigError, json_deserialize, json_serialize, sha256_hex


class TokenizationPath(StrEnum):
    DIFFERENTIABLE = "differentiable"
    FROZEN = "frozen"
    FEATURE_EMBED = "feature-embed"


class TrainingRegime(StrEnum):
    QA = "qa"
    QA_QG = "qa+qg"
    CYCLE = "cycle"
    DISCRIMINATIVE = "discriminative"


class DecodeMethod(StrEnum):
    GREEDY = "greedy"
    BEAM = "beam"


class EvaluationMode(StrEnum):
    GENERATE = "generate"
    SCORE_CANDIDATES = "score-candidates"


QUESTION_INPUT = "question"
HISTORY_INPUT = "history"
SPEECH_INPUT = "speech"
TEXT_INPUTS = (QUESTION_INPUT, HISTORY_INPUT, SPEECH_INPUT)

# short names accepted in ablation subsets, e.g. "Q+V+A"
INPUT_ABBREVIATIONS = {"Q": QUESTION_INPUT, "H": HISTORY_INPUT, "S": SPEECH_INPUT, "V": "video", "A": "audio"}


@dataclass(frozen=True, kw_only=True)
class ChannelConfig:
    name: str
    category_count: int
    sample_count: int
    feature_width: int = 16
    name_length: int = 2
    temperature: float = 1.0
    path: TokenizationPath = TokenizationPath.DIFFERENTIABLE


def default_channels() -> Tuple[ChannelConfig, ...]:
    return (
        ChannelConfig(name="video", category_count=20, sample_count=12),
        ChannelConfig(name="audio", category_count=10, sample_count=6),
    )


@dataclass(frozen=True, kw_only=True)
class WorldConfig:
    seed: Optional[int] = None
    noise_scale: float = 0.5
    mean_scale: float = 1.0
    miscalibration: float = 0.3
    train_size: int = 2000
    validation_size: int = 500
    test_size: int = 500
    candidate_count: int = 5
    question_types: Tuple[str, ...] = ("video", "audio", "video+audio")
    caption_fraction: float = 0.0
    dialog_fraction: float = 0.0
    pretrain_steps: int = 300
    pretrain_learning_rate: float = 0.05


@dataclass(frozen=True, kw_only=True)
class ModelConfig:
    embedding_width: int = 64
    model_width: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    feed_forward_width: int = 128
    positional_encoding: bool = True
    dropout: float = 0.0
    layer_norm_epsilon: float = 1e-5
    dtype: str = "float64"


@dataclass(frozen=True, kw_only=True)
class TrainConfig:
    regime: TrainingRegime = TrainingRegime.QA
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-3
    milestones: Tuple[float, ...] = (0.5, 0.75)
    data_fraction: float = 1.0
    question_generation_weight: float = 1.0
    consistency_enabled: bool = True
    consistency_start_epoch: int = 2
    candidate_count: int = 5
    discriminative_finetune_epochs: int = 0


@dataclass(frozen=True, kw_only=True)
class DecodeConfig:
    method: DecodeMethod = DecodeMethod.GREEDY
    beam_width: int = 5
    max_length: int = 32
    length_normalization: bool = True
    candidates_in_input: bool = True


@dataclass(frozen=True, kw_only=True)
class SweepConfig:
    first_channel_grid: Tuple[int, ...] = (4, 8, 12, 16)
    second_channel_grid: Tuple[int, ...] = (2, 4, 6, 8)
    metric: str = "exact_match"


@dataclass(frozen=True, kw_only=True)
class AblationConfig:
    input_subsets: Tuple[str, ...] = ("Q", "Q+V", "Q+V+A", "Q+V+A+H")
    paths: Tuple[TokenizationPath, ...] = (TokenizationPath.DIFFERENTIABLE,)
    regimes: Tuple[TrainingRegime, ...] = (TrainingRegime.QA,)
    data_fractions: Tuple[float, ...] = (1.0,)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True, kw_only=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    parallelism: int = 1
    # None means every text segment and every channel
    active_inputs: Optional[Tuple[str, ...]] = None
    evaluation_mode: EvaluationMode = EvaluationMode.GENERATE
    world: WorldConfig = field(default_factory=WorldConfig)
    channels: Tuple[ChannelConfig, ...] = field(default_factory=default_channels)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def world_seed(self) -> int:
        return self.seed if self.world.seed is None else self.world.seed

    def channel(self, name: str) -> ChannelConfig:
        for x in self.channels:
            if x.name == name:
                return x
        raise ConfigError(f"no channel named {name}")

    def is_input_active(self, name: str) -> bool:
        return self.active_inputs is None or name in self.active_inputs


def config_to_dict(config) -> Dict[str, Any]:
    def convert(value):
        if dataclasses.is_dataclass(value):
            return {x.name: convert(getattr(value, x.name)) for x in dataclasses.fields(value)}
        if isinstance(value, Enum):
            return value.value
        if isinstance(value, (list, tuple)):
            return [convert(x) for x in value]
        return value

    return convert(config)


def _build_value(*, annotation, value, key):
    origin = typing.get_origin(annotation)
    arguments = typing.get_args(annotation)
    if origin is typing.Union:
        if value is None:
            return None
        return _build_value(annotation=next(x for x in arguments if x is not type(None)), value=value, key=key)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return tuple(_build_value(annotation=arguments[0], value=x, key=f"{key}.{i}") for i, x in enumerate(value))
    if dataclasses.is_dataclass(annotation):
        return build_dataclass(cls=annotation, data=value, key=key)
    if isinstance(annotation, type) and issubclass(annotation, Enum):
        try:
            return annotation(value)
        except ValueError as exception:
            raise ConfigError(f"Unsupported {key} {value!r}, expected one of {[x.value for x in annotation]}") from exception
    if annotation is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if annotation in (int, float, str, bool) and not isinstance(value, annotation):
        raise ConfigError(f"{key} must be {annotation.__name__}, got {value!r}")
    if annotation is int and isinstance(value, bool):
        raise ConfigError(f"{key} must be int, got {value!r}")
    return value


def build_dataclass(*, cls, data, key: str = "config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{key} must be an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {x.name for x in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {key}")
    return cls(**{name: _build_value(annotation=hints[name], value=value, key=f"{key}.{name}") for name, value in data.items()})


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    return build_dataclass(cls=ExperimentConfig, data=data)


def parse_override_value(text: str):
    try:
        return json_deserialize(text)
    except Exception:
        return text


def apply_override(*, data: Dict[str, Any], dotted_key: str, value) -> None:
    keys = dotted_key.split(".")
    node: Any = data
    for i, key in enumerate(keys):
        last = i == len(keys) - 1
        if isinstance(node, list):
            if not key.isdigit() or int(key) >= len(node):
                raise ConfigError(f"override {dotted_key}: {key} is not a valid index")
            if last:
                node[int(key)] = value
            else:
                node = node[int(key)]
        elif isinstance(node, dict):
            if key not in node:
                raise ConfigError(f"override {dotted_key}: unknown key {key}")
            if last:
                node[key] = value
            else:
                node = node[key]
        else:
            raise ConfigError(f"override {dotted_key}: cannot descend into {key}")


def load_config(*, path: Optional[str] = None, overrides: Sequence[Tuple[str, Any]] = ()) -> ExperimentConfig:
    """
    Resolve defaults, then the JSON file at `path`, then `overrides` (dotted key, value) in order,
    and validate the result.
    """
    data = config_to_dict(ExperimentConfig())
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        with open(path, "rb") as f:
            try:
                file_data = json_deserialize(f.read())
            except Exception as exception:
                raise ConfigError(f"config file {path} is not valid JSON: {exception}") from exception
        if not isinstance(file_data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        data = config_to_dict(config_from_dict(file_data))
    for dotted_key, value in overrides:
        apply_override(data=data, dotted_key=dotted_key, value=value)
    config = config_from_dict(data)
    validate_config(config)
    return config


def replace_config(config: ExperimentConfig, overrides: Sequence[Tuple[str, Any]]) -> ExperimentConfig:
    data = config_to_dict(config)
    for dotted_key, value in overrides:
        apply_override(data=data, dotted_key=dotted_key, value=value)
    result = config_from_dict(data)
    validate_config(result)
    return result


def expand_input_subset(subset: str) -> Tuple[str, ...]:
    names = []
    for part in subset.split("+"):
        part = part.strip()
        names.append(INPUT_ABBREVIATIONS.get(part, part))
    return tuple(names)


def validate_config(config: ExperimentConfig) -> None:
    errors: List[str] = []
    channel_names = [x.name for x in config.channels]
    if len(set(channel_names)) != len(channel_names):
        errors.append(f"channel names must be distinct, got {channel_names}")
    for x in config.channels:
        if x.category_count < 2:
            errors.append(f"channel {x.name}: category_count must be >= 2, got {x.category_count}")
        if not 1 <= x.sample_count <= x.category_count:
            errors.append(f"channel {x.name}: sample_count K={x.sample_count} must satisfy 1 <= K <= C={x.category_count}")
        if x.feature_width < 1 or x.name_length < 1:
            errors.append(f"channel {x.name}: feature_width and name_length must be positive")
        if not x.temperature > 0:
            errors.append(f"channel {x.name}: temperature must be positive, got {x.temperature}")

    known_inputs = set(TEXT_INPUTS) | set(channel_names)
    if config.active_inputs is not None:
        unknown = sorted(set(config.active_inputs) - known_inputs)
        if unknown:
            errors.append(f"active_inputs {unknown} name neither a text segment nor a channel")
    for subset in config.ablation.input_subsets:
        unknown = sorted(set(expand_input_subset(subset)) - known_inputs)
        if unknown:
            errors.append(f"ablation input subset {subset} names unknown inputs {unknown}")

    world = config.world
    if not world.noise_scale >= 0:
        errors.append(f"world.noise_scale must be >= 0, got {world.noise_scale}")
    if not 0 <= world.miscalibration <= 1:
        errors.append(f"world.miscalibration must be in [0, 1], got {world.miscalibration}")
    if min(world.train_size, world.validation_size, world.test_size) < 0 or world.train_size < 1:
        errors.append("world split sizes must be non-negative and train_size must be positive")
    if world.candidate_count == 1 or world.candidate_count < 0:
        errors.append(f"world.candidate_count must be 0 (no candidates) or >= 2, got {world.candidate_count}")
    if not world.question_types:
        errors.append("world.question_types must not be empty")
    for question_type in world.question_types:
        missing = [x for x in question_type.split("+") if x not in channel_names]
        if missing:
            errors.append(f"question type {question_type} references missing channels {missing}")
    if not (0 <= world.caption_fraction and 0 <= world.dialog_fraction and world.caption_fraction + world.dialog_fraction <= 1):
        errors.append("world.caption_fraction and world.dialog_fraction must be non-negative and sum to at most 1")

    model = config.model
    if model.heads < 1 or model.model_width % model.heads:
        errors.append(f"model.model_width {model.model_width} must be divisible by model.heads {model.heads}")
    if min(model.embedding_width, model.model_width, model.feed_forward_width, model.encoder_layers, model.decoder_layers) < 1:
        errors.append("model widths and layer counts must be positive")
    if not 0 <= model.dropout < 1:
        errors.append(f"model.dropout must be in [0, 1), got {model.dropout}")
    if model.dtype not in ("float32", "float64"):
        errors.append(f"Unsupported model.dtype {model.dtype}")

    train = config.train
    if train.epochs < 1 or train.batch_size < 1:
        errors.append("train.epochs and train.batch_size must be positive")
    if not train.learning_rate > 0:
        errors.append(f"train.learning_rate must be positive, got {train.learning_rate}")
    if any(not 0 < x < 1 for x in train.milestones) or any(b <= a for a, b in zip(train.milestones, train.milestones[1:])):
        errors.append(f"train.milestones must be strictly increasing in (0, 1), got {list(train.milestones)}")
    if not 0 < train.data_fraction <= 1:
        errors.append(f"train.data_fraction must be in (0, 1], got {train.data_fraction}")
    if train.question_generation_weight < 0:
        errors.append("train.question_generation_weight must be non-negative")
    if train.consistency_start_epoch < 1 or train.discriminative_finetune_epochs < 0:
        errors.append("train.consistency_start_epoch must be >= 1 and train.discriminative_finetune_epochs >= 0")
    if train.candidate_count < 2:
        errors.append(f"train.candidate_count must be >= 2, got {train.candidate_count}")
    if (train.regime == TrainingRegime.DISCRIMINATIVE or train.discriminative_finetune_epochs) and world.candidate_count != train.candidate_count:
        errors.append(f"discriminative head needs world.candidate_count == train.candidate_count == {train.candidate_count}, got {world.candidate_count}")

    decode = config.decode
    if decode.beam_width < 1 or decode.max_length < 1:
        errors.append("decode.beam_width and decode.max_length must be >= 1")

    if config.parallelism < 1:
        errors.append("parallelism must be >= 1")
    if not config.sweep.first_channel_grid or not config.sweep.second_channel_grid:
        errors.append("sweep grids must not be empty")
    if not all(getattr(config.ablation, x) for x in ("input_subsets", "paths", "regimes", "data_fractions", "seeds")):
        errors.append("ablation axes must not be empty")
    if any(not 0 < x <= 1 for x in config.ablation.data_fractions):
        errors.append("ablation data fractions must be in (0, 1]")

    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))


def serialize_config(config: ExperimentConfig) -> str:
    return json_serialize(config_to_dict(config), indent=True)


def write_config_snapshot(*, config: ExperimentConfig, run_dir: str) -> str:
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, "config.json")
    with open(path, "w") as f:
        f.write(serialize_config(config))
    return path


def architecture_hash(config: ExperimentConfig) -> str:
    # parameters saved under one hash can be loaded into any config with the same hash
    data = config_to_dict(config)
    return sha256_hex(payload=json_serialize({"model": data["model"], "channels": data["channels"]}))
