#!/usr/bin/env python3

import argparse
import itertools

import numpy as np
import pytest

from modal_to_text.config import ChannelConfig, TokenizationPath
from modal_to_text.tensor import Tape, Tensor, mul, numerical_gradient, relative_error, sum_all
from modal_to_text.text import TextTokenizer
from modal_to_text.tokenization import (
    GumbelConfig,
    GumbelMode,
    ModalityChannel,
    as_feature_tensor,
    differentiable_tokenize,
    feature_embed,
    frozen_tokenize,
    gumbel_from_uniform,
    gumbel_noise,
    perturb_topk,
    rank_perturbed_scores,
    soft_selection,
    soft_surrogate_embed,
    straight_through_embed,
    tokenize_channel,
)
from modal_to_text.utility import DimensionError, SelectionError, create_rng

PLACKETT_LUCE_CASES = [
    ([0.5, 0.3, 0.2], 2),
    ([0.1, 0.2, 0.3, 0.4], 2),
    ([0.05, 0.05, 0.1, 0.2, 0.25, 0.35], 3),
    ([0.4, 0.0, 0.3, 0.0, 0.3], 2),
    ([1 / 6] * 6, 3),
]


def create_channel(*, path=TokenizationPath.DIFFERENTIABLE, category_count=5, sample_count=2, temperature=0.5, seed=0):
    names = [f"category{i}" for i in range(category_count)]
    tokenizer = TextTokenizer.from_corpus(texts=names)
    config = ChannelConfig(
        name="video", category_count=category_count, sample_count=sample_count, feature_width=3, name_length=2, temperature=temperature, path=path
    )
    table = create_rng(seed, "table").normal(size=(tokenizer.vocabulary_size, 4))
    return ModalityChannel(config=config, category_names=names, tokenizer=tokenizer, embedding_table=table, rng=create_rng(seed, "channel"))


def plackett_luce_probability(probabilities, outcome):
    result, remaining = 1.0, 1.0
    for index in outcome:
        result *= probabilities[index] / remaining
        remaining -= probabilities[index]
    return result


@pytest.mark.parametrize("probabilities,sample_count", PLACKETT_LUCE_CASES)
def test_perturbed_topk_follows_sampling_without_replacement(probabilities, sample_count):
    probabilities = np.asarray(probabilities)
    sample_total = 200_000
    noise = gumbel_noise((sample_total, probabilities.size), create_rng(0, "plackett-luce", sample_count, probabilities.size))
    outcomes = rank_perturbed_scores(probabilities=probabilities, noise=noise, sample_count=sample_count)
    counts = {}
    for row in map(tuple, outcomes.tolist()):
        counts[row] = counts.get(row, 0) + 1
    support = [x for x in itertools.permutations(range(probabilities.size), sample_count) if all(probabilities[i] > 0 for i in x)]
    assert set(counts) <= set(support)
    distance = 0.5 * sum(abs(counts.get(x, 0) / sample_total - plackett_luce_probability(probabilities, x)) for x in support)
    assert distance <= 0.02


def test_perturb_topk_returns_distinct_nonzero_categories():
    probabilities = np.array([0.3, 0.0, 0.2, 0.1, 0.4])
    rng = create_rng(0, "distinct")
    for _ in range(200):
        sampled = perturb_topk(probabilities=probabilities, sample_count=3, config=GumbelConfig(), rng=rng)
        assert len(set(sampled.indices)) == 3
        assert 1 not in sampled.indices
        assert list(sampled.scores) == sorted(sampled.scores, reverse=True)


def test_eval_mode_picks_the_most_probable_categories():
    sampled = perturb_topk(
        probabilities=np.array([0.1, 0.4, 0.2, 0.3]), sample_count=3, config=GumbelConfig(mode=GumbelMode.EVAL_DETERMINISTIC), rng=create_rng(0)
    )
    assert sampled.indices == (1, 3, 2)
    assert not sampled.noise.any()


def test_eval_mode_breaks_ties_by_lowest_index():
    sampled = perturb_topk(probabilities=np.array([0.25, 0.25, 0.25, 0.25]), sample_count=2, config=GumbelConfig(mode=GumbelMode.EVAL_DETERMINISTIC))
    assert sampled.indices == (0, 1)


def test_sample_count_equal_to_category_count_is_a_permutation():
    sampled = perturb_topk(probabilities=np.array([0.2, 0.3, 0.5]), sample_count=3, config=GumbelConfig(), rng=create_rng(1))
    assert sorted(sampled.indices) == [0, 1, 2]


def test_same_seed_gives_same_selection():
    probabilities = np.array([0.2, 0.3, 0.5])
    first = perturb_topk(probabilities=probabilities, sample_count=2, config=GumbelConfig(seed=11))
    second = perturb_topk(probabilities=probabilities, sample_count=2, config=GumbelConfig(seed=11))
    assert first.indices == second.indices
    np.testing.assert_array_equal(first.noise, second.noise)


def test_too_few_nonzero_categories():
    with pytest.raises(SelectionError):
        perturb_topk(probabilities=np.array([0.5, 0.5, 0.0]), sample_count=3, config=GumbelConfig(), rng=create_rng(0))


@pytest.mark.parametrize("probabilities,sample_count", [([0.5, 0.6], 1), ([1.0, 0.0], 0), ([1.0, 0.0], 3), ([[0.5, 0.5]], 1)])
def test_invalid_selection_arguments(probabilities, sample_count):
    with pytest.raises(ValueError):
        perturb_topk(probabilities=np.array(probabilities), sample_count=sample_count, config=GumbelConfig(), rng=create_rng(0))


def test_non_positive_temperature_is_rejected():
    with pytest.raises(ValueError):
        GumbelConfig(temperature=0.0)


def test_gumbel_noise_is_finite_at_the_uniform_boundaries():
    assert np.isfinite(gumbel_from_uniform(np.array([0.0, 1.0, 0.5]))).all()


def test_gumbel_fixed_points():
    np.testing.assert_allclose(gumbel_from_uniform(np.array([1 / np.e, np.exp(-np.e)])), [0.0, -1.0], atol=1e-12)


def test_gumbel_noise_mean_is_the_euler_mascheroni_constant():
    assert gumbel_noise(1_000_000, create_rng(0, "gumbel-mean")).mean() == pytest.approx(np.euler_gamma, abs=0.01)


@pytest.mark.parametrize("noise, winner", [([0.0, 0.0, 0.0, 0.0], 1), ([2.0, 0.0, 0.0, 0.0], 0)])
def test_soft_selection_at_a_small_temperature_is_one_hot(noise, winner):
    probabilities = Tensor(np.array([[0.1, 0.5, 0.3, 0.1]]))
    selection = soft_selection(probabilities=probabilities, noise=np.array(noise), temperature=0.01)
    np.testing.assert_allclose(selection.data.reshape(-1), np.eye(4)[winner], atol=1e-9)


def test_straight_through_forward_is_a_hard_gather():
    channel = create_channel(sample_count=3)
    features = create_rng(0, "features").normal(size=3)
    embeddings, sampled = differentiable_tokenize(channel=channel, features=features, mode=GumbelMode.TRAIN_SAMPLE, rng=create_rng(0, "noise"))
    expected = channel.embedding_weight.data[list(sampled.indices)].reshape(channel.output_length, channel.embedding_width)
    np.testing.assert_array_equal(embeddings.data, expected)


def test_embedding_weight_starts_from_the_name_token_embeddings():
    channel = create_channel()
    tokenizer = TextTokenizer.from_corpus(texts=channel.category_names)
    table = create_rng(0, "table").normal(size=(tokenizer.vocabulary_size, 4))
    rows = channel.embedding_weight.data.reshape(channel.config.category_count, channel.config.name_length, channel.embedding_width)
    for i, name in enumerate(channel.category_names):
        np.testing.assert_array_equal(rows[i, 0], table[tokenizer.token_ids[name]])
        np.testing.assert_array_equal(rows[i, 1], table[tokenizer.pad_id])


def test_straight_through_backward_equals_soft_surrogate_backward():
    channel = create_channel(sample_count=3)
    features = as_feature_tensor(features=create_rng(1, "features").normal(size=3), dtype=np.float64)
    functional = Tensor(create_rng(1, "functional").normal(size=(channel.output_length, channel.embedding_width)))

    def gradients(embed):
        for x in channel.parameters().values():
            x.grad = None
        with Tape():
            probabilities = channel.classifier_probabilities(features)
            sampled = perturb_topk(probabilities=probabilities.data[0], sample_count=3, config=GumbelConfig(), rng=create_rng(1, "noise"))
            output = embed(channel=channel, probabilities=probabilities, sampled=sampled, temperature=channel.config.temperature)
            sum_all(mul(output, functional)).backward()
        return channel.classifier_weight.grad.copy(), channel.classifier_bias.grad.copy(), channel.embedding_weight.grad.copy()

    for straight_through, surrogate in zip(gradients(straight_through_embed), gradients(soft_surrogate_embed)):
        np.testing.assert_array_equal(straight_through, surrogate)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_soft_surrogate_gradient_matches_finite_differences(seed):
    channel = create_channel(sample_count=2, seed=seed)
    features = as_feature_tensor(features=create_rng(seed, "features").normal(size=3), dtype=np.float64)
    noise = gumbel_noise(channel.config.category_count, create_rng(seed, "noise"))
    functional = Tensor(create_rng(seed, "functional").normal(size=(channel.output_length, channel.embedding_width)))

    def loss():
        probabilities = channel.classifier_probabilities(features)
        sampled = perturb_topk(probabilities=probabilities.data[0], sample_count=2, config=GumbelConfig(), noise=noise)
        output = soft_surrogate_embed(channel=channel, probabilities=probabilities, sampled=sampled, temperature=channel.config.temperature)
        return sum_all(mul(output, functional))

    channel.classifier_weight.grad = None
    with Tape():
        loss().backward()
    expected = numerical_gradient(function=lambda: loss().item(), tensor=channel.classifier_weight)
    assert relative_error(actual=channel.classifier_weight.grad, expected=expected) <= 1e-5


def test_frozen_path_gives_no_classifier_gradient():
    channel = create_channel(path=TokenizationPath.FROZEN, sample_count=3)
    features = create_rng(2, "features").normal(size=3)
    with Tape():
        embeddings, sampled = frozen_tokenize(channel=channel, features=features)
        sum_all(embeddings).backward()
    assert channel.classifier_weight.grad is None or not channel.classifier_weight.grad.any()
    assert channel.classifier_bias.grad is None or not channel.classifier_bias.grad.any()
    assert channel.embedding_weight.grad[list(sampled.indices)].any()
    assert "video.classifier_weight" not in channel.trainable_parameters()


def test_frozen_path_is_deterministic_even_when_training():
    channel = create_channel(path=TokenizationPath.FROZEN, sample_count=3)
    features = create_rng(3, "features").normal(size=3)
    first, _ = tokenize_channel(channel=channel, features=features, mode=GumbelMode.TRAIN_SAMPLE, rng=create_rng(0))
    second, _ = tokenize_channel(channel=channel, features=features, mode=GumbelMode.TRAIN_SAMPLE, rng=create_rng(1))
    np.testing.assert_array_equal(first.data, second.data)


def test_feature_embed_shape_and_gradient():
    channel = create_channel(path=TokenizationPath.FEATURE_EMBED, sample_count=2)
    features = create_rng(4, "features").normal(size=3)
    functional = Tensor(create_rng(4, "functional").normal(size=(channel.output_length, channel.embedding_width)))

    def loss():
        return sum_all(mul(feature_embed(channel=channel, features=features), functional))

    with Tape():
        output = feature_embed(channel=channel, features=features)
        assert output.shape == (channel.output_length, channel.embedding_width)
        loss().backward()
    for name in ("fc_weight", "classifier_weight"):
        tensor = channel.feature_embed_parameters[name] if name == "fc_weight" else channel.classifier_weight
        expected = numerical_gradient(function=lambda: loss().item(), tensor=tensor)
        assert relative_error(actual=tensor.grad, expected=expected) <= 1e-5


def test_category_names_longer_than_the_name_length_are_rejected():
    tokenizer = TextTokenizer.from_corpus(texts=["a b c", "d"])
    config = ChannelConfig(name="audio", category_count=2, sample_count=1, feature_width=2, name_length=2)
    with pytest.raises(DimensionError):
        table = np.zeros((tokenizer.vocabulary_size, 3))
        ModalityChannel(config=config, category_names=["a b c", "d"], tokenizer=tokenizer, embedding_table=table, rng=create_rng(0))


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--skip-sampling-law", action="store_true")
    args = parser.parse_args()
    if not args.skip_sampling_law:
        for probabilities, sample_count in PLACKETT_LUCE_CASES:
            test_perturbed_topk_follows_sampling_without_replacement(probabilities, sample_count)
    test_straight_through_forward_is_a_hard_gather()
    test_straight_through_backward_equals_soft_surrogate_backward()
    test_frozen_path_gives_no_classifier_gradient()
