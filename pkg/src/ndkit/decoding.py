"""Response generation: greedy search and beam search with a length penalty.

Both decoders run against a next-token scorer (anything exposing
``vocab_size`` and ``logits(prefix) -> np.ndarray``), so toy hand-built
models and the transformer share one code path. PAD/BOS/UNK are never
emitted; log-probabilities are normalized over the remaining tokens in
float64 for run-to-run determinism. Argmax ties break towards the lowest
token id, and beam ties break lexicographically on the token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .corpus import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocab, normalize, tokenize
from .errors import ConfigError, DataError
from .model import Seq2SeqTransformer

FORBIDDEN_IDS = (PAD_ID, BOS_ID, UNK_ID)

STRATEGIES = ("greedy", "beam")


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 5
    length_penalty_exponent: float = 1.0
    max_decode_length: int = 30

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.length_penalty_exponent < 0:
            raise ConfigError("length_penalty_exponent must be >= 0")
        if self.max_decode_length < 1:
            raise ConfigError("max_decode_length must be >= 1")


class StepScorer(Protocol):
    vocab_size: int

    def logits(self, prefix: Sequence[int]) -> np.ndarray: ...


class TransformerScorer:
    """Adapts a trained model to the scorer interface; encodes the query once."""

    def __init__(self, model: Seq2SeqTransformer, query_ids: Sequence[int]):
        self.model = model
        self.vocab_size = model.config.vocab_size
        queries = torch.tensor([list(query_ids)], dtype=torch.long)
        self.query_mask = torch.ones_like(queries, dtype=torch.bool)
        with torch.no_grad():
            self.memory = model.encode(queries, self.query_mask)

    def logits(self, prefix: Sequence[int]) -> np.ndarray:
        with torch.no_grad():
            out = self.model.next_token_logits(self.memory, self.query_mask, prefix)
        return out.to(torch.float64).numpy()


def masked_log_probs(scorer: StepScorer, prefix: Sequence[int]) -> np.ndarray:
    """float64 log-probabilities over emittable tokens (PAD/BOS/UNK excluded)."""
    logits = np.asarray(scorer.logits(prefix), dtype=np.float64).copy()
    for token_id in FORBIDDEN_IDS:
        if token_id < logits.shape[0]:
            logits[token_id] = -np.inf
    shifted = logits - logits[np.isfinite(logits)].max()
    log_norm = np.log(np.exp(shifted[np.isfinite(shifted)]).sum())
    return shifted - log_norm


def greedy_decode(scorer: StepScorer, config: DecodeConfig) -> list[int]:
    """Emit the argmax token each step until EOS or max_decode_length."""
    tokens: list[int] = []
    for _ in range(config.max_decode_length):
        log_probs = masked_log_probs(scorer, tokens)
        pick = int(np.argmax(log_probs))
        if pick == EOS_ID:
            break
        tokens.append(pick)
    return tokens


def _penalized(logprob_sum: float, length: int, exponent: float) -> float:
    return logprob_sum / (length ** exponent)


def beam_decode(scorer: StepScorer, config: DecodeConfig) -> list[int]:
    """Beam search over summed log-probabilities with length normalization.

    Finished hypotheses (EOS emitted, or cut at max_decode_length) leave the
    active beam for a finished pool and are scored by
    logprob_sum / length^exponent, where length counts emitted tokens
    including the EOS. The best finished hypothesis is returned without its
    EOS. With beam_size 1 and exponent 0 this reduces to greedy search.
    """
    active: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(config.max_decode_length):
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for logprob_sum, tokens in active:
            log_probs = masked_log_probs(scorer, tokens)
            for token_id in range(log_probs.shape[0]):
                if not np.isfinite(log_probs[token_id]):
                    continue
                candidates.append(
                    (logprob_sum + float(log_probs[token_id]), tokens + (token_id,))
                )
        candidates.sort(key=lambda cand: (-cand[0], cand[1]))
        active = []
        for logprob_sum, tokens in candidates[: config.beam_size]:
            if tokens[-1] == EOS_ID:
                score = _penalized(logprob_sum, len(tokens),
                                   config.length_penalty_exponent)
                finished.append((score, tokens[:-1]))
            else:
                active.append((logprob_sum, tokens))
        if not active:
            break
    for logprob_sum, tokens in active:
        score = _penalized(logprob_sum, len(tokens), config.length_penalty_exponent)
        finished.append((score, tokens))
    best = min(finished, key=lambda hyp: (-hyp[0], hyp[1]))
    return list(best[1])


def decode_query(model: Seq2SeqTransformer, query_ids: Sequence[int],
                 config: DecodeConfig) -> list[int]:
    if config.max_decode_length > model.config.max_sequence_length - 1:
        raise ConfigError(
            f"max_decode_length={config.max_decode_length} exceeds the model's "
            f"capacity of {model.config.max_sequence_length - 1}"
        )
    scorer = TransformerScorer(model, query_ids)
    if config.strategy == "greedy":
        return greedy_decode(scorer, config)
    return beam_decode(scorer, config)


def decode_file(model: Seq2SeqTransformer, vocab: Vocab, input_path: str | Path,
                output_path: str | Path, config: DecodeConfig) -> int:
    """Decode a TSV of queries into `query \\t response` lines, order-preserving.

    Input lines may be bare queries or `query \\t anything` (the extra field
    is ignored), so test-set pair files work directly.
    """
    queries: list[str] = []
    with open(input_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) > 2 or not normalize(fields[0]):
                raise DataError(f"{input_path}:{lineno}: expected a query in field 1")
            queries.append(fields[0])
    if not queries:
        raise DataError(f"{input_path}: no queries found")
    with open(output_path, "w", encoding="utf-8") as out:
        for query in queries:
            ids = tokenize(query, vocab)
            response_ids = decode_query(model, ids, config)
            out.write(f"{query}\t{vocab.decode(response_ids)}\n")
    return len(queries)
