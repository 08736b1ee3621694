#!/usr/bin/env python3

import argparse
import itertools

import numpy as np
import pytest

from modal_to_text.config import DecodeConfig, DecodeMethod
from modal_to_text.decoding import beam_search, decode_tokens, generate, greedy_decode, score_candidates
from modal_to_text.seq2seq import create_model_input
from modal_to_text.tensor import no_grad
from modal_to_text.utility import create_rng
from tiny_world import answer_example, overfit, tiny_setup

ORACLE_SEEDS = list(range(20))


class TableDecoder:
    """Next-token log-probabilities drawn once per history from a seeded generator."""

    def __init__(self, *, seed, vocabulary_size=3, eos_id=0, eos_allowed=True):
        self.seed = seed
        self.vocabulary_size = vocabulary_size
        self.eos_id = eos_id
        self.eos_allowed = eos_allowed
        self.calls = 0

    def next_log_probabilities(self, history):
        self.calls += 1
        logits = create_rng(self.seed, "table-decoder", *history).normal(size=self.vocabulary_size) * 2.0
        if not self.eos_allowed:
            logits[self.eos_id] = -1e9
        return logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()


def sequence_log_probability(decoder, tokens):
    return sum(float(decoder.next_log_probabilities(list(tokens[:i]))[x]) for i, x in enumerate(tokens))


def exhaustive_best(decoder, *, max_length, length_normalization=True):
    """Every sequence that ends in EOS, plus every EOS-free sequence of exactly `max_length` tokens."""
    words = [x for x in range(decoder.vocabulary_size) if x != decoder.eos_id]
    sequences = []
    for length in range(max_length):
        sequences += [tuple(x) + (decoder.eos_id,) for x in itertools.product(words, repeat=length)]
    sequences += [tuple(x) for x in itertools.product(words, repeat=max_length)]

    def score(tokens):
        value = sequence_log_probability(decoder, tokens)
        return value / len(tokens) if length_normalization else value

    return max(sequences, key=score), score


@pytest.mark.parametrize("seed", ORACLE_SEEDS)
@pytest.mark.parametrize("length_normalization", [True, False])
def test_wide_beam_equals_exhaustive_search(seed, length_normalization):
    decoder = TableDecoder(seed=seed)
    max_length = 3
    best, _ = exhaustive_best(decoder, max_length=max_length, length_normalization=length_normalization)
    width = decoder.vocabulary_size**max_length
    result = beam_search(decoder=decoder, width=width, max_length=max_length, length_normalization=length_normalization)
    assert result.tokens == best


@pytest.mark.parametrize("seed", ORACLE_SEEDS)
def test_beam_never_beats_the_oracle_and_width_one_is_greedy(seed):
    decoder = TableDecoder(seed=seed, vocabulary_size=4)
    max_length = 4
    best, score = exhaustive_best(decoder, max_length=max_length)
    for width in (1, 2, 3):
        result = beam_search(decoder=decoder, width=width, max_length=max_length)
        assert result.score(length_normalization=True) <= score(best) + 1e-12
        assert result.log_probability == pytest.approx(sequence_log_probability(decoder, result.tokens), abs=1e-9)
    assert list(beam_search(decoder=decoder, width=1, max_length=max_length).tokens) == greedy_decode(decoder=decoder, max_length=max_length)


def test_decoding_stops_at_max_length_without_eos():
    decoder = TableDecoder(seed=0, eos_allowed=False)
    assert len(greedy_decode(decoder=decoder, max_length=5)) == 5
    result = beam_search(decoder=decoder, width=3, max_length=5)
    assert len(result.tokens) == 5
    assert not result.finished


def test_greedy_stops_at_eos():
    decoder = TableDecoder(seed=3)
    tokens = greedy_decode(decoder=decoder, max_length=50)
    assert tokens[-1] == decoder.eos_id or len(tokens) == 50
    assert decoder.eos_id not in tokens[:-1]


@pytest.mark.parametrize("width,max_length", [(0, 3), (2, 0)])
def test_invalid_beam_arguments(width, max_length):
    with pytest.raises(ValueError):
        beam_search(decoder=TableDecoder(seed=0), width=width, max_length=max_length)


def test_decode_tokens_dispatches_on_the_method():
    decoder = TableDecoder(seed=5)
    greedy = decode_tokens(decoder=decoder, config=DecodeConfig(method=DecodeMethod.GREEDY, max_length=4))
    assert greedy == greedy_decode(decoder=decoder, max_length=4)
    beam = decode_tokens(decoder=decoder, config=DecodeConfig(method=DecodeMethod.BEAM, beam_width=1, max_length=4))
    assert beam == greedy


def test_generate_respects_max_length_and_reports_the_selection():
    config, _, splits, system = tiny_setup()
    example = splits["train"][0]
    with no_grad():
        tokens, encoded = generate(model_input=create_model_input(example), model=system.model, channels=system.channels, config=config.decode)
    assert 1 <= len(tokens) <= config.decode.max_length
    assert set(encoded.sampled) == {"video", "audio"}
    assert len(encoded.sampled["video"].indices) == 3


def test_duplicate_candidates_tie_to_the_lowest_index():
    _, _, splits, system = tiny_setup()
    example = answer_example(splits["train"])
    model_input = create_model_input(example, include_candidates=False)
    with no_grad():
        best, scores = score_candidates(model_input=model_input, candidates=[example.candidates[1]] * 2, model=system.model, channels=system.channels)
    assert best == 0
    assert scores[0].loss == scores[1].loss


def test_held_out_scoring_is_permutation_equivariant():
    _, _, splits, system = tiny_setup()
    example = answer_example(splits["train"])
    model_input = create_model_input(example, include_candidates=False)
    candidates = list(example.candidates)
    permutation = [2, 0, 1]
    with no_grad():
        best, scores = score_candidates(model_input=model_input, candidates=candidates, model=system.model, channels=system.channels)
        permuted_best, permuted_scores = score_candidates(
            model_input=model_input, candidates=[candidates[x] for x in permutation], model=system.model, channels=system.channels
        )
    assert candidates[best] == candidates[permutation[permuted_best]]
    for i, x in enumerate(permutation):
        assert permuted_scores[i].loss == pytest.approx(scores[x].loss, abs=1e-12)


def test_scoring_needs_two_candidates():
    _, _, splits, system = tiny_setup()
    example = answer_example(splits["train"])
    with pytest.raises(ValueError):
        score_candidates(model_input=create_model_input(example), candidates=[example.answer], model=system.model, channels=system.channels)


def test_overfit_model_selects_its_training_answer():
    _, _, splits, system = tiny_setup()
    example = answer_example(splits["train"])
    model_input = create_model_input(example)
    target = system.tokenizer.tokenize(example.answer, append_eos=True)
    assert overfit(system=system, model_input=model_input, target_ids=target) < 0.01
    with no_grad():
        best, _ = score_candidates(model_input=model_input, model=system.model, channels=system.channels)
    assert best == example.gold_candidate_index



def test_random_models_score_five_candidates_at_chance():
    hits = []
    for seed in range(10):
        _, _, splits, system = tiny_setup([("seed", seed), ("world.test_size", 60), ("world.candidate_count", 5), ("train.candidate_count", 5)])
        with no_grad():
            for example in (x for x in splits["test"] if x.candidates):
                best, _ = score_candidates(model_input=create_model_input(example), model=system.model, channels=system.channels)
                hits.append(best == example.gold_candidate_index)
    assert len(hits) >= 500
    assert np.mean(hits) == pytest.approx(0.2, abs=0.05)


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--models", type=int, default=len(ORACLE_SEEDS), help="Number of random decoders checked against exhaustive search.")
    args = parser.parse_args()
    for seed in range(args.models):
        test_wide_beam_equals_exhaustive_search(seed, True)
        test_beam_never_beats_the_oracle_and_width_one_is_greedy(seed)
