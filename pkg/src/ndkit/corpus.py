"""Dialogue corpus handling.

TSV ingestion, whitespace tokenization, vocabulary construction, the
source-entropy score of responses, and the split of a training set into
a high-entropy (negative) subset and the remainder.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataError, EmptyInputError

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


def normalize(text: str) -> list[str]:
    """Lowercase and whitespace-split; returns [] for blank input."""
    return text.lower().split()


def normalized_string(text: str) -> str:
    return " ".join(normalize(text))


@dataclass
class Vocab:
    """Token <-> id mapping with training-split frequency counts.

    Ids 0..3 are reserved for PAD/BOS/EOS/UNK. Frequencies are exact counts
    over the texts the vocabulary was built from (the training split), and
    cover every token seen there, kept or not.
    """

    token_to_id: dict[str, int]
    id_to_token: list[str]
    frequency: dict[str, int]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def freq(self, token: str) -> int:
        return self.frequency.get(token, 0)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)


def build_vocab(texts: Iterable[str], max_size: int) -> Vocab:
    """Build a vocabulary of the most frequent tokens.

    ``max_size`` caps the total size including the 4 reserved ids. Ties in
    frequency are broken by first occurrence in the corpus (Counter preserves
    insertion order, and most_common's sort is stable).
    """
    if max_size < len(RESERVED_TOKENS):
        raise ConfigError(
            f"max_size={max_size} is smaller than the {len(RESERVED_TOKENS)} reserved tokens"
        )
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(normalize(text))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    keep = max_size - len(RESERVED_TOKENS)
    id_to_token = list(RESERVED_TOKENS)
    for token, _ in counts.most_common(keep):
        id_to_token.append(token)
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocab(token_to_id=token_to_id, id_to_token=id_to_token, frequency=dict(counts))


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Map text to token ids; unknown tokens become UNK.

    Raises EmptyInputError when nothing is left after normalization.
    """
    tokens = normalize(text)
    if not tokens:
        raise EmptyInputError(f"text is empty after normalization: {text!r}")
    return [vocab.lookup(tok) for tok in tokens]


@dataclass
class DialoguePair:
    """One (query, response) pair, tokenized, with the raw text kept around."""

    query: list[int]
    response: list[int]
    raw_query: str
    raw_response: str

    def __post_init__(self) -> None:
        if not self.query or not self.response:
            raise DataError("query and response must tokenize to at least one token")


@dataclass
class Dataset:
    """A list of pairs belonging to one split, optionally entropy-annotated."""

    pairs: list[DialoguePair]
    split: str = "train"
    entropy: list[float] | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @classmethod
    def from_raw_pairs(
        cls, raw_pairs: Sequence[tuple[str, str]], vocab: Vocab, split: str = "train"
    ) -> "Dataset":
        pairs = [
            DialoguePair(
                query=tokenize(q, vocab),
                response=tokenize(r, vocab),
                raw_query=q,
                raw_response=r,
            )
            for q, r in raw_pairs
        ]
        return cls(pairs=pairs, split=split)


def read_pairs_tsv(path: str | Path) -> list[tuple[str, str]]:
    """Read a `query \\t response` TSV.

    Lines that do not have exactly two fields, or whose fields are empty
    after normalization, are rejected with their line numbers.
    """
    bad: list[int] = []
    pairs: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not normalize(fields[0]) or not normalize(fields[1]):
                bad.append(lineno)
                continue
            pairs.append((fields[0], fields[1]))
    if bad:
        shown = ", ".join(str(n) for n in bad[:20])
        more = "" if len(bad) <= 20 else f" (+{len(bad) - 20} more)"
        raise DataError(f"{path}: rejected lines without two non-empty fields: {shown}{more}")
    if not pairs:
        raise DataError(f"{path}: no dialogue pairs found")
    return pairs


def write_pairs_tsv(path: str | Path, pairs: Iterable[tuple[str, str] | DialoguePair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            if isinstance(pair, DialoguePair):
                q, r = pair.raw_query, pair.raw_response
            else:
                q, r = pair
            fh.write(f"{q}\t{r}\n")


@dataclass
class EntropyTable:
    """Source entropy per distinct (normalized) response string.

    ``query_counts`` keeps, for each response, the count of every distinct
    query it was paired with; ``entropy`` is in nats and is 0 exactly when a
    response co-occurs with a single distinct query.
    """

    entropy: dict[str, float] = field(default_factory=dict)
    query_counts: dict[str, Counter] = field(default_factory=dict)

    def of(self, response_text: str) -> float:
        return self.entropy[normalized_string(response_text)]

    def distinct_queries(self, response_text: str) -> int:
        return len(self.query_counts[normalized_string(response_text)])

    def export_tsv(self, path: str | Path) -> None:
        rows = sorted(self.entropy.items(), key=lambda kv: (-kv[1], kv[0]))
        with open(path, "w", encoding="utf-8") as fh:
            for response, ent in rows:
                fh.write(f"{response}\t{ent:.12g}\t{len(self.query_counts[response])}\n")


def source_entropy(dataset: Dataset) -> EntropyTable:
    """Entropy of the query distribution conditioned on each response.

    For a response r seen with queries q_i, H(r) = -sum_i p(q_i|r) ln p(q_i|r)
    with p(q_i|r) the relative frequency of (q_i, r) among all pairs carrying
    r. Every pair occurrence counts; strings are compared after the same
    lowercase + whitespace normalization as tokenization. Natural log.
    """
    if not dataset.pairs:
        raise DataError("cannot compute entropy of an empty dataset")
    per_response: dict[str, Counter] = {}
    for pair in dataset.pairs:
        resp = normalized_string(pair.raw_response)
        query = normalized_string(pair.raw_query)
        per_response.setdefault(resp, Counter())[query] += 1
    table = EntropyTable()
    for resp, counts in per_response.items():
        total = sum(counts.values())
        ent = 0.0
        for count in counts.values():
            p = count / total
            ent -= p * math.log(p)
        table.entropy[resp] = max(ent, 0.0)
        table.query_counts[resp] = counts
    return table


def rank_and_split(
    dataset: Dataset, table: EntropyTable, ratio: float
) -> tuple[Dataset, Dataset]:
    """Split off the ceil(ratio * N) highest-entropy pairs as the negative set.

    A pair inherits the entropy of its normalized response string. The sort is
    stable with original-order tie-breaking; the two outputs are disjoint,
    their union is the input, and both preserve the input's pair order.
    """
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    entropies = [table.of(pair.raw_response) for pair in dataset.pairs]
    n_negative = math.ceil(ratio * len(dataset.pairs))
    order = sorted(range(len(dataset.pairs)), key=lambda i: -entropies[i])
    negative_idx = set(order[:n_negative])
    neg_pairs, neg_ent, rem_pairs, rem_ent = [], [], [], []
    for i, pair in enumerate(dataset.pairs):
        if i in negative_idx:
            neg_pairs.append(pair)
            neg_ent.append(entropies[i])
        else:
            rem_pairs.append(pair)
            rem_ent.append(entropies[i])
    negative = Dataset(pairs=neg_pairs, split=dataset.split, entropy=neg_ent)
    remaining = Dataset(pairs=rem_pairs, split=dataset.split, entropy=rem_ent)
    return negative, remaining
