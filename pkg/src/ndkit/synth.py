"""Synthetic many-to-one dialogue corpus for desk-scale experiments.

Stands in for a real single-turn dialogue corpus: a configurable share of
pairs reuse one of a few fixed generic responses (many distinct queries ->
one response), the rest get a response unique to their query, built by a
fixed word-for-word substitution of the query plus a little token noise.
The substitution makes the informative responses learnable and
generalizable, while the generic templates still dominate the per-position
probability mass (they share their first word), so a likelihood-trained
model prefers them; by construction the generic responses carry positive
source entropy and every unique response has entropy zero.
"""

from __future__ import annotations

import random

from .errors import ConfigError

GENERIC_TEMPLATE_POOL = (
    "i do not know",
    "i am not sure",
    "i have no idea",
    "i can not say",
    "i do not mind",
    "i am not certain",
    "i can not tell",
    "i do not care",
    "i am not here",
    "i do not think so",
)

_WORD_POOL = tuple(f"w{i:03d}" for i in range(160))
_SUBSTITUTION_NOISE = 0.15


def generic_templates(count: int) -> list[str]:
    """The first `count` generic responses; synthesized past the builtin pool."""
    if count < 1:
        raise ConfigError(f"template count must be >= 1, got {count}")
    templates = list(GENERIC_TEMPLATE_POOL[:count])
    for i in range(len(templates), count):
        templates.append(f"i do not know variant v{i:03d}")
    return templates


def _sample_distinct(rng: random.Random, taken: set[str], min_len: int = 3, max_len: int = 6) -> str:
    while True:
        length = rng.randint(min_len, max_len)
        text = " ".join(rng.choice(_WORD_POOL) for _ in range(length))
        if text not in taken:
            taken.add(text)
            return text


def generate_synthetic_corpus(
    template_count: int, query_count: int, generic_ratio: float, seed: int
) -> list[tuple[str, str]]:
    """Deterministically generate `query_count` (query, response) pairs.

    Exactly round(generic_ratio * query_count) pairs get a template response;
    templates are spread round-robin over a seeded shuffle of the pair
    indices, so each template is paired with >= 2 distinct queries (enforced
    as a feasibility check). All queries are distinct; all non-template
    responses are distinct strings that never collide with a template.
    """
    if not (0.0 < generic_ratio < 1.0):
        raise ConfigError(f"generic ratio must lie strictly in (0, 1), got {generic_ratio}")
    if query_count < 1:
        raise ConfigError(f"query count must be >= 1, got {query_count}")
    templates = generic_templates(template_count)
    n_generic = round(generic_ratio * query_count)
    if n_generic < 2 * template_count:
        raise ConfigError(
            f"infeasible: {n_generic} generic pairs cannot cover {template_count} "
            "templates with >= 2 distinct queries each"
        )
    if query_count - n_generic < 1:
        raise ConfigError("infeasible: no room left for unique-response pairs")

    rng = random.Random(seed)
    substitution = dict(zip(_WORD_POOL, rng.sample(_WORD_POOL, len(_WORD_POOL))))
    taken_queries: set[str] = set()
    queries = [_sample_distinct(rng, taken_queries) for _ in range(query_count)]

    indices = list(range(query_count))
    rng.shuffle(indices)
    responses: list[str] = [""] * query_count
    for slot, idx in enumerate(indices[:n_generic]):
        responses[idx] = templates[slot % template_count]
    taken_responses = set(templates)
    for idx in indices[n_generic:]:
        while True:
            words = [
                rng.choice(_WORD_POOL) if rng.random() < _SUBSTITUTION_NOISE
                else substitution[word]
                for word in queries[idx].split()
            ]
            candidate = " ".join(words)
            if candidate not in taken_responses:
                taken_responses.add(candidate)
                responses[idx] = candidate
                break
    return list(zip(queries, responses))
