from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

STOP_WORDS_VERSION = 1
STOP_WORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been before being below between both but by can could did do does
    doing down during each few for from further had has have having he her here hers herself him himself his how i if in into is it its itself
    just me more most my myself no nor not now of off on once only or other our ours ourselves out over own same she should so some such than
    that the their theirs them themselves then there these they this those through to too under until up very was we were what when where which
    while who whom why will with would you your yours yourself yourselves
    """.split()
)


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    """
    Single-reference sentence BLEU up to order `n`: geometric mean of clipped k-gram precisions
    times the brevity penalty. No smoothing, so any zero precision gives 0.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    if not candidate:
        return 0.0
    log_precision_sum = 0.0
    for k in range(1, n + 1):
        candidate_counts = ngram_counts(candidate, k)
        total = sum(candidate_counts.values())
        if total == 0:
            return 0.0
        reference_counts = ngram_counts(reference, k)
        clipped = sum(min(count, reference_counts[gram]) for gram, count in candidate_counts.items())
        if clipped == 0:
            return 0.0
        log_precision_sum += math.log(clipped / total)
    brevity_penalty = 1.0 if len(candidate) > len(reference) else math.exp(1.0 - len(reference) / len(candidate))
    return brevity_penalty * math.exp(log_precision_sum / n)


def longest_common_subsequence(a: Sequence[str], b: Sequence[str]) -> int:
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = 1.2) -> float:
    if not reference:
        raise ValueError("ROUGE-L needs a non-empty reference")
    if not candidate:
        return 0.0
    lcs = longest_common_subsequence(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    beta_squared = beta * beta
    return (1 + beta_squared) * precision * recall / (recall + beta_squared * precision)


def exact_match(candidate: Sequence[str], reference: Sequence[str]) -> float:
    return 1.0 if list(candidate) == list(reference) else 0.0


@dataclass(frozen=True, kw_only=True)
class MetricReport:
    exact_match: Optional[float] = None
    top1_accuracy: Optional[float] = None
    head_top1_accuracy: Optional[float] = None
    bleu_1: Optional[float] = None
    bleu_2: Optional[float] = None
    bleu_3: Optional[float] = None
    bleu_4: Optional[float] = None
    rouge_l: Optional[float] = None
    counts: Mapping[str, int] = field(default_factory=dict)

    def as_readable_dict(self):
        return {key: value for key, value in self.as_record().items() if value is not None}

    def as_record(self) -> Dict:
        return {
            "exact_match": self.exact_match,
            "top1_accuracy": self.top1_accuracy,
            "head_top1_accuracy": self.head_top1_accuracy,
            "bleu_1": self.bleu_1,
            "bleu_2": self.bleu_2,
            "bleu_3": self.bleu_3,
            "bleu_4": self.bleu_4,
            "rouge_l": self.rouge_l,
            "counts": dict(self.counts),
        }


def mean(values: Sequence[float]) -> Optional[float]:
    # fixed left-to-right summation order
    if not values:
        return None
    total = 0.0
    for x in values:
        total += x
    return total / len(values)


def generation_report(*, candidates: Sequence[str], references: Sequence[str], rouge_beta: float = 1.2) -> MetricReport:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} generated texts for {len(references)} references")
    candidate_tokens = [x.split() for x in candidates]
    reference_tokens = [x.split() for x in references]
    pairs = list(zip(candidate_tokens, reference_tokens))
    return MetricReport(
        exact_match=mean([exact_match(c, r) for c, r in pairs]),
        bleu_1=mean([bleu_n(c, r, 1) for c, r in pairs]),
        bleu_2=mean([bleu_n(c, r, 2) for c, r in pairs]),
        bleu_3=mean([bleu_n(c, r, 3) for c, r in pairs]),
        bleu_4=mean([bleu_n(c, r, 4) for c, r in pairs]),
        rouge_l=mean([rouge_l(c, r, beta=rouge_beta) for c, r in pairs if r]),
        counts={"generated": len(pairs)},
    )


@dataclass(frozen=True, kw_only=True)
class TfidfTable:
    rankings: Dict[str, Dict[int, List[Tuple[str, float]]]]
    never_sampled: Dict[str, List[int]]

    def rows(self, *, category_names: Optional[Mapping[str, Sequence[str]]] = None):
        for channel, by_category in self.rankings.items():
            for category, ranking in by_category.items():
                name = category_names[channel][category] if category_names else str(category)
                for rank, (word, score) in enumerate(ranking, start=1):
                    yield channel, category, name, rank, word, score


def tfidf_correlation(
    *,
    generated: Sequence[str],
    sampled_categories: Sequence[Mapping[str, Sequence[int]]],
    category_counts: Mapping[str, int],
    speech: Optional[Sequence[Optional[str]]] = None,
    top_k: int = 10,
    stop_words=STOP_WORDS,
) -> TfidfTable:
    """
    Rank generated words per sampled category. For every channel, each category forms one document
    holding the generated texts of the examples where it was sampled, with stop words and the
    words of that example's speech transcript removed. Scores are tf(word, category document)
    times log(number of non-empty category documents / number containing the word).
    """
    if not generated:
        raise ValueError("tf.idf needs a non-empty generated corpus")
    if len(sampled_categories) != len(generated) or (speech is not None and len(speech) != len(generated)):
        raise ValueError("generated texts, sampled categories and speech transcripts must align")
    rankings: Dict[str, Dict[int, List[Tuple[str, float]]]] = {}
    never_sampled: Dict[str, List[int]] = {}
    for channel, category_count in category_counts.items():
        documents: Dict[int, Counter] = {x: Counter() for x in range(category_count)}
        for i, text in enumerate(generated):
            excluded = set(speech[i].split()) if speech is not None and speech[i] else set()
            words = [x for x in text.split() if x not in stop_words and x not in excluded]
            for category in set(sampled_categories[i].get(channel, ())):
                documents[category].update(words)
        sampled = [x for x in range(category_count) if any(x in s.get(channel, ()) for s in sampled_categories)]
        never_sampled[channel] = [x for x in range(category_count) if x not in sampled]
        non_empty = [x for x in sampled if documents[x]]
        document_frequency: Counter = Counter()
        for category in non_empty:
            document_frequency.update(set(documents[category]))
        rankings[channel] = {}
        for category in range(category_count):
            counts = documents[category]
            total = sum(counts.values())
            if category not in sampled or total == 0:
                rankings[channel][category] = []
                continue
            scores = [(word, (count / total) * math.log(len(non_empty) / document_frequency[word])) for word, count in counts.items()]
            scores.sort(key=lambda x: (-x[1], x[0]))
            rankings[channel][category] = scores[:top_k]
    return TfidfTable(rankings=rankings, never_sampled=never_sampled)
