"""Automatic evaluation of generated responses.

Dist-{1,2,3} (distinct n-gram ratio over the whole response set), LF
(low-frequency token ratio against training counts), KL-{1,2} (smoothed
n-gram distribution divergence between references and generations) and
corpus-averaged smoothed sentence BLEU-{3,4}.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

from .corpus import UNK_ID, Vocab
from .errors import ConfigError, DataError, UndefinedMetricError

KL_DIRECTIONS = ("ref_to_gen", "gen_to_ref")
BLEU_VARIANT = "add-one smoothing on modified precisions of orders >= 2"


def ngrams(tokens: Sequence[Hashable], n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def dist_n(responses: Sequence[Sequence[Hashable]], n: int) -> float:
    """Distinct n-grams over total n-gram occurrences, pooled over the corpus."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    counts: Counter = Counter()
    for response in responses:
        counts.update(ngrams(response, n))
    total = sum(counts.values())
    if total == 0:
        raise UndefinedMetricError(f"no {n}-grams in the response set")
    return len(counts) / total


def lf_ratio(responses: Sequence[Sequence[str]], vocab: Vocab, threshold: int = 100) -> float:
    """Share of generated token occurrences that are rare in the training set.

    A token counts as low-frequency when its training-split frequency is
    below the threshold; anything mapping to UNK (or any reserved id) counts
    as high-frequency.
    """
    total = 0
    rare = 0
    for response in responses:
        for token in response:
            total += 1
            if vocab.lookup(token) <= UNK_ID:
                continue
            if vocab.freq(token) < threshold:
                rare += 1
    if total == 0:
        raise UndefinedMetricError("no generated tokens")
    return rare / total


def _ngram_distribution(corpus: Sequence[Sequence[Hashable]], n: int) -> Counter:
    counts: Counter = Counter()
    for tokens in corpus:
        counts.update(ngrams(tokens, n))
    return counts


def kl_n(generated: Sequence[Sequence[Hashable]],
         references: Sequence[Sequence[Hashable]], n: int, *,
         epsilon: float = 1e-9, direction: str = "ref_to_gen") -> float:
    """KL divergence between n-gram distributions with add-epsilon smoothing.

    Smoothing spreads epsilon over the union support so disjoint corpora stay
    finite. Natural log. Default direction penalizes a generator that misses
    reference mass: KL(references || generated).
    """
    if direction not in KL_DIRECTIONS:
        raise ConfigError(f"direction must be one of {KL_DIRECTIONS}")
    gen_counts = _ngram_distribution(generated, n)
    ref_counts = _ngram_distribution(references, n)
    if not gen_counts or not ref_counts:
        raise UndefinedMetricError(f"one of the corpora has no {n}-grams")
    if direction == "gen_to_ref":
        ref_counts, gen_counts = gen_counts, ref_counts
    support = set(ref_counts) | set(gen_counts)
    ref_total = sum(ref_counts.values()) + epsilon * len(support)
    gen_total = sum(gen_counts.values()) + epsilon * len(support)
    divergence = 0.0
    for gram in support:
        p = (ref_counts.get(gram, 0) + epsilon) / ref_total
        q = (gen_counts.get(gram, 0) + epsilon) / gen_total
        divergence += p * math.log(p / q)
    if divergence < 0.0:
        if divergence < -1e-12:
            raise UndefinedMetricError(f"negative KL {divergence}; smoothing bug")
        divergence = 0.0
    return divergence


def sentence_bleu(hypothesis: Sequence[Hashable], reference: Sequence[Hashable],
                  n: int) -> float:
    """Smoothed sentence-level BLEU-n.

    Modified precisions for orders 1..n; orders >= 2 get add-one smoothing on
    both match and candidate counts, order 1 stays raw so zero unigram
    overlap scores 0. Geometric mean times the brevity penalty.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if not hypothesis:
        return 0.0
    log_precisions = 0.0
    for order in range(1, n + 1):
        hyp_counts = Counter(ngrams(hypothesis, order))
        ref_counts = Counter(ngrams(reference, order))
        matches = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
        candidates = sum(hyp_counts.values())
        if order == 1:
            if matches == 0:
                return 0.0
            precision = matches / candidates
        else:
            precision = (matches + 1) / (candidates + 1)
        log_precisions += math.log(precision)
    brevity = 1.0
    if len(hypothesis) < len(reference):
        brevity = math.exp(1.0 - len(reference) / len(hypothesis))
    return brevity * math.exp(log_precisions / n)


def bleu_n(hypotheses: Sequence[Sequence[Hashable]],
           references: Sequence[Sequence[Hashable]], n: int) -> float:
    """Corpus mean of sentence-level BLEU-n over aligned pairs."""
    if len(hypotheses) != len(references):
        raise DataError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise UndefinedMetricError("empty corpus")
    return sum(sentence_bleu(h, r, n) for h, r in zip(hypotheses, references)) / len(hypotheses)


@dataclass
class MetricsReport:
    """All metric values plus the knobs they were computed under.

    A metric whose denominator was empty is None (absent), never 0.
    """

    dist_1: float | None
    dist_2: float | None
    dist_3: float | None
    lf: float | None
    kl_1: float | None
    kl_2: float | None
    bleu_3: float | None
    bleu_4: float | None
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    _FIELDS = ("dist_1", "dist_2", "dist_3", "lf", "kl_1", "kl_2", "bleu_3", "bleu_4")

    def to_json_dict(self) -> dict:
        payload = {name: getattr(self, name) for name in self._FIELDS}
        payload["counts"] = self.counts
        payload["config"] = self.config
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        lines = []
        for name in self._FIELDS:
            value = getattr(self, name)
            rendered = "absent" if value is None else f"{value:.6f}"
            lines.append(f"{name.replace('_', '-'):<8} {rendered:>12}")
        return "\n".join(lines)


def compute_report(hypotheses: Sequence[Sequence[str]],
                   references: Sequence[Sequence[str]], vocab: Vocab, *,
                   lf_threshold: int = 100, kl_epsilon: float = 1e-9,
                   kl_direction: str = "ref_to_gen") -> MetricsReport:
    """Run the full suite, recording absent metrics instead of failing."""

    def attempt(fn):
        try:
            return fn()
        except UndefinedMetricError:
            return None

    counts = {
        "responses": len(hypotheses),
        "references": len(references),
        "tokens": sum(len(h) for h in hypotheses),
        "ngram_occurrences": {
            str(n): sum(max(len(h) - n + 1, 0) for h in hypotheses) for n in (1, 2, 3)
        },
    }
    config = {
        "lf_threshold": lf_threshold,
        "kl_epsilon": kl_epsilon,
        "kl_direction": kl_direction,
        "bleu_smoothing": BLEU_VARIANT,
    }
    return MetricsReport(
        dist_1=attempt(lambda: dist_n(hypotheses, 1)),
        dist_2=attempt(lambda: dist_n(hypotheses, 2)),
        dist_3=attempt(lambda: dist_n(hypotheses, 3)),
        lf=attempt(lambda: lf_ratio(hypotheses, vocab, lf_threshold)),
        kl_1=attempt(lambda: kl_n(hypotheses, references, 1,
                                  epsilon=kl_epsilon, direction=kl_direction)),
        kl_2=attempt(lambda: kl_n(hypotheses, references, 2,
                                  epsilon=kl_epsilon, direction=kl_direction)),
        bleu_3=attempt(lambda: bleu_n(hypotheses, references, 3)),
        bleu_4=attempt(lambda: bleu_n(hypotheses, references, 4)),
        counts=counts,
        config=config,
    )
