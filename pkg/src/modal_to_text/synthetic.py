from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from modal_to_text.config import ChannelConfig, ExperimentConfig, WorldConfig, config_to_dict
from modal_to_text.dataset import MultimodalExample, read_examples, write_examples
from modal_to_text.optimizer import Adam
from modal_to_text.tensor import Tape, Tensor, cross_entropy
from modal_to_text.text import TaskToken
from modal_to_text.tokenization import ModalityChannel
from modal_to_text.utility import ConfigError, Logger, LoggerApi, LogLevel, ceil_fraction, create_rng, json_deserialize, json_serialize

SPLITS = ("train", "validation", "test")

CATEGORY_NAME_POOLS = {
    "video": (
        "playing guitar",
        "riding bike",
        "cooking pasta",
        "painting wall",
        "washing dishes",
        "throwing ball",
        "reading book",
        "climbing rock",
        "swimming",
        "dancing",
        "juggling",
        "typing",
        "running",
        "skating",
        "drawing",
        "knitting",
        "sweeping floor",
        "feeding cat",
        "folding clothes",
        "planting tree",
    ),
    "audio": (
        "dog barking",
        "rain",
        "thunder",
        "piano music",
        "car horn",
        "applause",
        "birds singing",
        "siren",
        "laughter",
        "footsteps",
    ),
}

QUESTION_TEMPLATES = {
    ("video",): "what action is shown in the video",
    ("audio",): "what sound can be heard",
    ("video", "audio"): "what is happening",
}

SPEECH_PHRASES = ("look at this", "this is fun", "listen carefully", "come over here", "i like it")

# connective words of the answer, caption and history templates
TEMPLATE_WORDS = "with there is and earlier someone mentioned said hello what in the"


def category_names_for(*, channel: ChannelConfig) -> Tuple[str, ...]:
    pool = CATEGORY_NAME_POOLS.get(channel.name, ())
    names = [x for x in pool if len(x.split()) <= channel.name_length][: channel.category_count]
    names += [f"{channel.name}{i}" for i in range(len(names), channel.category_count)]
    return tuple(names)


def question_text(*, question_type: str) -> str:
    names = tuple(question_type.split("+"))
    return QUESTION_TEMPLATES.get(names, f"what is in the {' and '.join(names)}")


def world_fingerprint(*, config: WorldConfig, channels: Sequence[ChannelConfig]) -> Dict:
    # K, temperature and path do not change the data
    return {
        "world": config_to_dict(config),
        "channels": [{"name": x.name, "category_count": x.category_count, "feature_width": x.feature_width, "name_length": x.name_length} for x in channels],
    }


@dataclass(frozen=True, kw_only=True)
class SyntheticWorld:
    seed: int
    config: WorldConfig
    channels: Tuple[ChannelConfig, ...]
    category_names: Mapping[str, Tuple[str, ...]]
    category_means: Mapping[str, np.ndarray]
    corrupted_categories: Mapping[str, Tuple[int, ...]]
    label_permutations: Mapping[str, Tuple[int, ...]]

    def channel_config(self, name: str) -> ChannelConfig:
        for x in self.channels:
            if x.name == name:
                return x
        raise ConfigError(f"world has no channel {name}")

    def answer_for(self, *, question_type: str, latent_categories: Mapping[str, int]) -> str:
        try:
            return " with ".join(self.category_names[x][latent_categories[x]] for x in question_type.split("+"))
        except KeyError as exception:
            raise ConfigError(f"question type {question_type} references missing category {exception}") from exception

    def corrupt_label(self, *, channel_name: str, category: int) -> int:
        if category in self.corrupted_categories[channel_name]:
            return self.label_permutations[channel_name][category]
        return category

    def infer_categories(self, *, features: Mapping[str, np.ndarray]) -> Dict[str, int]:
        # nearest category mean, the Bayes rule under isotropic Gaussian noise
        return {key: int(np.argmin(((self.category_means[key] - value) ** 2).sum(axis=1))) for key, value in features.items()}

    def oracle_answer(self, example: MultimodalExample) -> str:
        if example.question_type is None:
            raise ValueError(f"example {example.example_id} has no question type")
        return self.answer_for(question_type=example.question_type, latent_categories=self.infer_categories(features=example.features))

    def texts(self) -> List[str]:
        texts = [name for names in self.category_names.values() for name in names]
        texts += [question_text(question_type=x) for x in self.config.question_types]
        texts += list(SPEECH_PHRASES)
        texts.append(TEMPLATE_WORDS)
        texts += [x.name for x in self.channels]
        return texts

    def as_record(self) -> Dict:
        return {
            "seed": self.seed,
            "world_config": world_fingerprint(config=self.config, channels=self.channels),
            "category_names": {key: list(value) for key, value in self.category_names.items()},
            "category_means": {key: value.tolist() for key, value in self.category_means.items()},
            "corrupted_categories": {key: list(value) for key, value in self.corrupted_categories.items()},
            "label_permutations": {key: list(value) for key, value in self.label_permutations.items()},
        }


def corrupted_label_map(*, category_count: int, order: Sequence[int]) -> Tuple[int, ...]:
    """Identity on clean categories, a cyclic shift along `order` on the corrupted ones (no fixed points)."""
    mapping = list(range(category_count))
    if len(order) > 1:
        for index, category in enumerate(order):
            mapping[category] = order[(index + 1) % len(order)]
    return tuple(mapping)


def create_world(*, config: ExperimentConfig) -> SyntheticWorld:
    world_config = config.world
    seed = config.world_seed
    category_names = {}
    category_means = {}
    corrupted = {}
    permutations = {}
    for channel in config.channels:
        rng = create_rng(seed, "world", channel.name)
        category_names[channel.name] = category_names_for(channel=channel)
        category_means[channel.name] = rng.normal(0.0, world_config.mean_scale, (channel.category_count, channel.feature_width))
        corrupted_count = ceil_fraction(count=channel.category_count, fraction=world_config.miscalibration)
        if corrupted_count == 1 and channel.category_count > 1:
            # one category cannot be relabelled within its own set
            corrupted_count = 2
        order = [int(x) for x in rng.choice(channel.category_count, size=corrupted_count, replace=False)]
        corrupted[channel.name] = tuple(sorted(order))
        permutations[channel.name] = corrupted_label_map(category_count=channel.category_count, order=order)
    return SyntheticWorld(
        seed=seed,
        config=world_config,
        channels=config.channels,
        category_names=category_names,
        category_means=category_means,
        corrupted_categories=corrupted,
        label_permutations=permutations,
    )


def sample_candidates(
    *, world: SyntheticWorld, question_type: str, latent_categories: Mapping[str, int], rng: np.random.Generator
) -> Tuple[Tuple[str, ...], int]:
    """Gold answer plus distinct distractors drawn uniformly from other categories' answers."""
    count = world.config.candidate_count
    gold = world.answer_for(question_type=question_type, latent_categories=latent_categories)
    names = question_type.split("+")
    alternatives = []
    for combination in itertools.product(*(range(world.channel_config(x).category_count) for x in names)):
        answer = world.answer_for(question_type=question_type, latent_categories=dict(zip(names, combination)))
        if answer != gold and answer not in alternatives:
            alternatives.append(answer)
    if len(alternatives) < count - 1:
        raise ConfigError(f"question type {question_type} has only {len(alternatives)} distractors, {count - 1} needed")
    distractors = [alternatives[x] for x in rng.choice(len(alternatives), size=count - 1, replace=False)]
    gold_index = int(rng.integers(count))
    return tuple(distractors[:gold_index] + [gold] + distractors[gold_index:]), gold_index


def create_example(*, world: SyntheticWorld, example_id: str, rng: np.random.Generator) -> MultimodalExample:
    latent_categories = {x.name: int(rng.integers(x.category_count)) for x in world.channels}
    noise_scale = world.config.noise_scale
    features = {x.name: world.category_means[x.name][latent_categories[x.name]] + noise_scale * rng.standard_normal(x.feature_width) for x in world.channels}
    question_types = world.config.question_types
    draw = rng.random()
    if draw < world.config.caption_fraction:
        names = [world.category_names[x.name][latent_categories[x.name]] for x in world.channels]
        return MultimodalExample(
            example_id=example_id,
            task=TaskToken.CAPTION,
            answer="there is " + " and ".join(names),
            features=features,
            speech=SPEECH_PHRASES[int(rng.integers(len(SPEECH_PHRASES)))],
            latent_categories=latent_categories,
        )
    if draw < world.config.caption_fraction + world.config.dialog_fraction:
        question_type = max(question_types, key=lambda x: len(x.split("+")))
        if rng.random() < 0.5:
            revealed = world.channels[int(rng.integers(len(world.channels)))].name
            history = "earlier someone mentioned " + world.category_names[revealed][latent_categories[revealed]]
        else:
            history = "earlier someone said hello"
        return MultimodalExample(
            example_id=example_id,
            task=TaskToken.DIALOG,
            answer=world.answer_for(question_type=question_type, latent_categories=latent_categories),
            features=features,
            question=question_text(question_type=question_type),
            history=history,
            latent_categories=latent_categories,
            question_type=question_type,
        )
    question_type = question_types[int(rng.integers(len(question_types)))]
    candidates: Tuple[str, ...] = ()
    gold_index = None
    if world.config.candidate_count:
        candidates, gold_index = sample_candidates(world=world, question_type=question_type, latent_categories=latent_categories, rng=rng)
    return MultimodalExample(
        example_id=example_id,
        task=TaskToken.ANSWER,
        answer=world.answer_for(question_type=question_type, latent_categories=latent_categories),
        features=features,
        question=question_text(question_type=question_type),
        candidates=candidates,
        gold_candidate_index=gold_index,
        latent_categories=latent_categories,
        question_type=question_type,
    )


def generate_world(*, config: ExperimentConfig) -> Tuple[SyntheticWorld, Dict[str, List[MultimodalExample]]]:
    world = create_world(config=config)
    sizes = {"train": config.world.train_size, "validation": config.world.validation_size, "test": config.world.test_size}
    splits = {}
    for split in SPLITS:
        rng = create_rng(world.seed, "split", split)
        splits[split] = [create_example(world=world, example_id=f"{split}-{i:06d}", rng=rng) for i in range(sizes[split])]
    return world, splits


def write_world(*, world: SyntheticWorld, splits: Mapping[str, Sequence[MultimodalExample]], data_dir: str) -> None:
    os.makedirs(data_dir, exist_ok=True)
    with open(os.path.join(data_dir, "world.json"), "w") as f:
        f.write(json_serialize(world.as_record(), indent=True))
    for split, examples in splits.items():
        write_examples(path=os.path.join(data_dir, f"{split}.jsonl"), examples=examples)


def read_world(*, config: ExperimentConfig, data_dir: str) -> Tuple[SyntheticWorld, Dict[str, List[MultimodalExample]]]:
    path = os.path.join(data_dir, "world.json")
    if not os.path.exists(path):
        raise ConfigError(f"{path} does not exist; run gen-data first")
    with open(path, "rb") as f:
        record = json_deserialize(f.read())
    expected = world_fingerprint(config=config.world, channels=config.channels)
    if record.get("world_config") != json_deserialize(json_serialize(expected)) or record["seed"] != config.world_seed:
        raise ConfigError(f"{data_dir} holds data generated for a different world config or seed; rerun gen-data or choose another --out-dir")
    world = SyntheticWorld(
        seed=record["seed"],
        config=config.world,
        channels=config.channels,
        category_names={key: tuple(value) for key, value in record["category_names"].items()},
        category_means={key: np.asarray(value, dtype=np.float64) for key, value in record["category_means"].items()},
        corrupted_categories={key: tuple(value) for key, value in record["corrupted_categories"].items()},
        label_permutations={key: tuple(value) for key, value in record["label_permutations"].items()},
    )
    if set(world.category_names) != {x.name for x in config.channels}:
        raise ConfigError(f"{path} describes channels {sorted(world.category_names)}, config has {[x.name for x in config.channels]}")
    return world, {split: read_examples(path=os.path.join(data_dir, f"{split}.jsonl")) for split in SPLITS}


def pretrain_classifier(
    *, world: SyntheticWorld, channel: ModalityChannel, examples: Sequence[MultimodalExample], logger: Optional[LoggerApi] = None
) -> float:
    """
    Full-batch logistic regression of the channel's classifier on (features, possibly corrupted
    label) pairs. Returns the final training loss.
    """
    logger = logger if logger else Logger(level=LogLevel.WARNING, name=__name__)
    channel_config = world.channel_config(channel.name)
    if channel_config.feature_width != channel.config.feature_width or channel_config.category_count != channel.config.category_count:
        raise ConfigError(f"channel {channel.name} does not match the world's widths")
    usable = [x for x in examples if channel.name in x.features]
    if not usable:
        raise ValueError(f"no examples carry {channel.name} features")
    features = Tensor(np.stack([x.features[channel.name] for x in usable]), dtype=channel.classifier_weight.dtype)
    labels = [world.corrupt_label(channel_name=channel.name, category=x.latent_categories[channel.name]) for x in usable]
    optimizer = Adam(
        parameters={"weight": channel.classifier_weight, "bias": channel.classifier_bias}, learning_rate=world.config.pretrain_learning_rate, logger=logger
    )
    loss_value = float("nan")
    for step in range(world.config.pretrain_steps):
        optimizer.zero_grad()
        with Tape():
            loss = cross_entropy(channel.classifier_probabilities(features), labels)
            loss.backward()
        optimizer.step()
        loss_value = loss.item()
        if step % 50 == 0:
            logger.fine(f"pretrain {channel.name} step {step} loss {loss_value:.6f}")
    channel.classifier_weight.grad = None
    channel.classifier_bias.grad = None
    logger.info(f"pretrained {channel.name} classifier: loss {loss_value:.6f}, clean accuracy {classifier_accuracy(channel=channel, examples=usable):.4f}")
    return loss_value


def classifier_accuracy(*, channel: ModalityChannel, examples: Sequence[MultimodalExample]) -> float:
    usable = [x for x in examples if channel.name in x.features]
    if not usable:
        return float("nan")
    predictions = channel.predict_categories(np.stack([x.features[channel.name] for x in usable]))
    return float(np.mean([p == x.latent_categories[channel.name] for p, x in zip(predictions, usable)]))
