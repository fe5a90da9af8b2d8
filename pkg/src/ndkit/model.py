"""Miniature encoder-decoder transformer with an instrumented decoder.

The teacher-forced forward pass returns a ForwardTrace exposing per-position
logits, the output hidden states of every decoder layer and every decoder
layer's pre-softmax self-attention score matrices. Distillation losses
consume the trace; gradients flow through it via autograd and are verified
against finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import BOS_ID, EOS_ID, PAD_ID, Vocab
from .errors import ConfigError, SequenceTooLongError, ShapeError

CHECKPOINT_MAGIC = b"NDKIT-CKPT-1\n"
_DTYPE_CODES = {"f4": np.float32, "f8": np.float64, "i8": np.int64, "u1": np.uint8}


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    d_model must equal num_heads * d_k. Defaults are the desk-scale test
    configuration; the full-scale 6-layer/8-head/512-dim setup is
    constructible but not the default.
    """

    vocab_size: int
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    num_heads: int = 2
    d_model: int = 16
    d_ff: int = 32
    d_k: int = 8
    max_sequence_length: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self) -> None:
        if self.d_model != self.num_heads * self.d_k:
            raise ConfigError(
                f"d_model={self.d_model} must equal num_heads*d_k="
                f"{self.num_heads * self.d_k}"
            )
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for name in ("vocab_size", "num_encoder_layers", "num_decoder_layers",
                     "num_heads", "d_model", "d_ff", "d_k", "max_sequence_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size <= PAD_ID or self.vocab_size <= EOS_ID:
            raise ConfigError("vocab_size must cover the reserved token ids")


def softmax_with_temperature(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Temperature-softened softmax over the last dimension.

    p_i = exp(z_i/t) / sum_j exp(z_j/t), stabilized by max subtraction.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    shifted = (logits - logits.max(dim=-1, keepdim=True).values) / temperature
    weights = torch.exp(shifted)
    return weights / weights.sum(dim=-1, keepdim=True)


def attention_scores(queries: torch.Tensor, keys: torch.Tensor, d_k: int) -> torch.Tensor:
    """Pre-softmax scaled dot-product scores Q K^T / sqrt(d_k).

    Masking is the caller's job; this returns the raw score matrix.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(
            f"inner dimensions disagree: {queries.shape[-1]} vs {keys.shape[-1]}"
        )
    return queries @ keys.transpose(-2, -1) / math.sqrt(d_k)


def sinusoidal_positions(max_len: int, d_model: int, dtype: torch.dtype) -> torch.Tensor:
    position = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64)
                    * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table.to(dtype)


def _dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    if p <= 0.0:
        return x
    if generator is None:
        raise ConfigError("training-mode forward needs a seeded dropout generator")
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


@dataclass
class EncodedBatch:
    """Padded tensors for one teacher-forcing batch.

    decoder_input is BOS followed by the response tokens; targets are the
    response tokens followed by EOS. target_mask flags real (non-pad) target
    positions.
    """

    queries: torch.Tensor
    query_mask: torch.Tensor
    decoder_input: torch.Tensor
    targets: torch.Tensor
    target_mask: torch.Tensor

    def __len__(self) -> int:
        return self.queries.shape[0]


def encode_batch(pairs: Sequence, max_sequence_length: int) -> EncodedBatch:
    """Pad a list of pairs (DialoguePair or (query_ids, response_ids) tuples).

    Raises SequenceTooLongError instead of truncating anything.
    """
    seqs = []
    for pair in pairs:
        if hasattr(pair, "query"):
            seqs.append((list(pair.query), list(pair.response)))
        else:
            q, r = pair
            seqs.append((list(q), list(r)))
    if not seqs or any(not q or not r for q, r in seqs):
        raise ShapeError("every pair needs a non-empty query and response")
    max_q = max(len(q) for q, _ in seqs)
    max_t = max(len(r) for _, r in seqs) + 1
    if max_q > max_sequence_length or max_t > max_sequence_length:
        raise SequenceTooLongError(
            f"sequence length (query {max_q}, decoder {max_t}) exceeds "
            f"max_sequence_length={max_sequence_length}; refusing to truncate"
        )
    n = len(seqs)
    queries = torch.full((n, max_q), PAD_ID, dtype=torch.long)
    query_mask = torch.zeros(n, max_q, dtype=torch.bool)
    decoder_input = torch.full((n, max_t), PAD_ID, dtype=torch.long)
    targets = torch.full((n, max_t), PAD_ID, dtype=torch.long)
    target_mask = torch.zeros(n, max_t, dtype=torch.bool)
    for i, (q, r) in enumerate(seqs):
        queries[i, : len(q)] = torch.tensor(q, dtype=torch.long)
        query_mask[i, : len(q)] = True
        decoder_input[i, 0] = BOS_ID
        decoder_input[i, 1 : len(r) + 1] = torch.tensor(r, dtype=torch.long)
        targets[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        targets[i, len(r)] = EOS_ID
        target_mask[i, : len(r) + 1] = True
    return EncodedBatch(queries, query_mask, decoder_input, targets, target_mask)


@dataclass
class ForwardTrace:
    """Everything one teacher-forced forward pass exposes.

    decoder_attention holds each decoder layer's pre-softmax self-attention
    scores with one [T, T] matrix per head; entries outside attention_mask
    (causally masked or padded) are zeroed and must be ignored downstream.
    """

    logits: torch.Tensor
    decoder_hidden: list[torch.Tensor]
    decoder_attention: list[torch.Tensor]
    target_mask: torch.Tensor
    attention_mask: torch.Tensor
    cross_attention: list[torch.Tensor] | None = None

    @property
    def num_decoder_layers(self) -> int:
        return len(self.decoder_hidden)


class MultiHeadAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_heads = config.num_heads
        self.d_k = config.d_k
        self.query_proj = nn.Linear(config.d_model, config.num_heads * config.d_k)
        self.key_proj = nn.Linear(config.d_model, config.num_heads * config.d_k)
        self.value_proj = nn.Linear(config.d_model, config.num_heads * config.d_k)
        self.out_proj = nn.Linear(config.num_heads * config.d_k, config.d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.d_k).transpose(1, 2)

    def forward(self, x_query, x_kv, allowed):
        """allowed: bool [B, 1, T_q, T_k]; returns (output, masked raw scores)."""
        q = self._split(self.query_proj(x_query))
        k = self._split(self.key_proj(x_kv))
        v = self._split(self.value_proj(x_kv))
        scores = attention_scores(q, k, self.d_k)
        weights = torch.softmax(scores.masked_fill(~allowed, float("-inf")), dim=-1)
        context = weights @ v
        b, _, t, _ = context.shape
        merged = context.transpose(1, 2).reshape(b, t, self.num_heads * self.d_k)
        exposed = torch.where(allowed, scores, torch.zeros((), dtype=scores.dtype))
        return self.out_proj(merged), exposed


class FeedForward(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.expand = nn.Linear(config.d_model, config.d_ff)
        self.contract = nn.Linear(config.d_ff, config.d_model)
        self.dropout_rate = config.dropout_rate

    def forward(self, x, training: bool, generator):
        hidden = torch.relu(self.expand(x))
        if training:
            hidden = _dropout(hidden, self.dropout_rate, generator)
        return self.contract(hidden)


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attention = MultiHeadAttention(config)
        self.attention_norm = nn.LayerNorm(config.d_model)
        self.feed_forward = FeedForward(config)
        self.feed_forward_norm = nn.LayerNorm(config.d_model)
        self.dropout_rate = config.dropout_rate

    def forward(self, x, allowed, training, generator):
        attended, _ = self.self_attention(x, x, allowed)
        if training:
            attended = _dropout(attended, self.dropout_rate, generator)
        x = self.attention_norm(x + attended)
        transformed = self.feed_forward(x, training, generator)
        if training:
            transformed = _dropout(transformed, self.dropout_rate, generator)
        return self.feed_forward_norm(x + transformed)


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attention = MultiHeadAttention(config)
        self.self_attention_norm = nn.LayerNorm(config.d_model)
        self.cross_attention = MultiHeadAttention(config)
        self.cross_attention_norm = nn.LayerNorm(config.d_model)
        self.feed_forward = FeedForward(config)
        self.feed_forward_norm = nn.LayerNorm(config.d_model)
        self.dropout_rate = config.dropout_rate

    def forward(self, x, memory, self_allowed, cross_allowed, training, generator):
        attended, self_scores = self.self_attention(x, x, self_allowed)
        if training:
            attended = _dropout(attended, self.dropout_rate, generator)
        x = self.self_attention_norm(x + attended)
        crossed, cross_scores = self.cross_attention(x, memory, cross_allowed)
        if training:
            crossed = _dropout(crossed, self.dropout_rate, generator)
        x = self.cross_attention_norm(x + crossed)
        transformed = self.feed_forward(x, training, generator)
        if training:
            transformed = _dropout(transformed, self.dropout_rate, generator)
        return self.feed_forward_norm(x + transformed), self_scores, cross_scores


class Seq2SeqTransformer(nn.Module):
    """Post-norm transformer (sinusoidal positions, untied output projection)."""

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(config) for _ in range(config.num_encoder_layers)
        )
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(config) for _ in range(config.num_decoder_layers)
        )
        self.output_proj = nn.Linear(config.d_model, config.vocab_size)
        self.register_buffer(
            "positions",
            sinusoidal_positions(config.max_sequence_length, config.d_model, dtype),
            persistent=False,
        )
        self.dropout_generator: torch.Generator | None = None
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.weight.dtype

    def set_dropout_seed(self, seed: int) -> None:
        self.dropout_generator = torch.Generator().manual_seed(seed)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        scaled = self.embedding(ids) * math.sqrt(self.config.d_model)
        return scaled + self.positions[: ids.shape[1]]

    def encode(self, queries: torch.Tensor, query_mask: torch.Tensor,
               training: bool = False) -> torch.Tensor:
        allowed = query_mask[:, None, None, :]
        x = self._embed(queries)
        for layer in self.encoder_layers:
            x = layer(x, allowed, training, self.dropout_generator)
        return x

    def decode(self, decoder_input, target_mask, memory, query_mask,
               training: bool = False, collect_cross_attention: bool = False):
        t = decoder_input.shape[1]
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool))
        self_allowed = (causal[None, :, :] & target_mask[:, None, :])[:, None]
        cross_allowed = query_mask[:, None, None, :]
        x = self._embed(decoder_input)
        hidden, self_scores, cross_scores = [], [], []
        for layer in self.decoder_layers:
            x, scores, cross = layer(
                x, memory, self_allowed, cross_allowed, training, self.dropout_generator
            )
            hidden.append(x)
            self_scores.append(scores)
            if collect_cross_attention:
                cross_scores.append(cross)
        logits = self.output_proj(x)
        return logits, hidden, self_scores, (cross_scores if collect_cross_attention else None)

    def forward_trace(self, batch: EncodedBatch, mode: str = "eval",
                      collect_cross_attention: bool = False) -> ForwardTrace:
        """Teacher-forced forward pass over a padded batch.

        mode "eval" disables dropout and is deterministic; mode "train"
        applies dropout drawn from the model's dropout generator.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train" and self.config.dropout_rate > 0.0
        memory = self.encode(batch.queries, batch.query_mask, training)
        logits, hidden, self_scores, cross = self.decode(
            batch.decoder_input, batch.target_mask, memory, batch.query_mask,
            training, collect_cross_attention,
        )
        t = batch.decoder_input.shape[1]
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool))
        attention_mask = (
            causal[None, :, :]
            & batch.target_mask[:, None, :]
            & batch.target_mask[:, :, None]
        )
        return ForwardTrace(
            logits=logits,
            decoder_hidden=hidden,
            decoder_attention=self_scores,
            target_mask=batch.target_mask,
            attention_mask=attention_mask,
            cross_attention=cross,
        )

    def trace(self, query_ids: Sequence[int], response_ids: Sequence[int],
              mode: str = "eval", collect_cross_attention: bool = False) -> ForwardTrace:
        batch = encode_batch([(query_ids, response_ids)], self.config.max_sequence_length)
        return self.forward_trace(batch, mode=mode,
                                  collect_cross_attention=collect_cross_attention)

    def next_token_logits(self, memory: torch.Tensor, query_mask: torch.Tensor,
                          prefix_ids: Sequence[int]) -> torch.Tensor:
        """Logits for the next token after BOS + prefix (eval mode, batch of 1)."""
        ids = [BOS_ID, *prefix_ids]
        if len(ids) > self.config.max_sequence_length:
            raise SequenceTooLongError(
                f"decode prefix of length {len(ids)} exceeds "
                f"max_sequence_length={self.config.max_sequence_length}"
            )
        decoder_input = torch.tensor([ids], dtype=torch.long)
        mask = torch.ones(1, len(ids), dtype=torch.bool)
        logits, _, _, _ = self.decode(decoder_input, mask, memory, query_mask)
        return logits[0, -1]


def init_parameters(config: ModelConfig, seed: int,
                    dtype: torch.dtype = torch.float32) -> Seq2SeqTransformer:
    """Deterministically initialized model: N(0, 0.02) weights, unit norms."""
    model = Seq2SeqTransformer(config, dtype=dtype)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
            elif isinstance(module, (nn.Linear, nn.Embedding)):
                module.weight.normal_(0.0, 0.02, generator=generator)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    module.bias.fill_(0.0)
    return model


def _write_container(path: str | Path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    entries = []
    blobs = []
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().numpy()
        code = {np.float32: "f4", np.float64: "f8", np.int64: "i8",
                np.uint8: "u1"}[array.dtype.type]
        entries.append({"name": name, "shape": list(array.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(array).astype(f"<{code}").tobytes())
    header = dict(meta)
    header["tensors"] = entries
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def _read_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not an ndkit checkpoint (bad magic)")
        header = json.loads(fh.readline().decode("utf-8"))
        tensors: dict[str, torch.Tensor] = {}
        for entry in header["tensors"]:
            np_dtype = _DTYPE_CODES[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * np.dtype(np_dtype).itemsize)
            array = np.frombuffer(raw, dtype=f"<{entry['dtype']}").reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(array.copy())
    return header, tensors


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, torch.Tensor]
    vocab: Vocab | None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, model: Seq2SeqTransformer,
                    vocab: Vocab | None = None, extra: dict | None = None) -> None:
    """Self-describing container: text JSON header + named float32 tensors.

    load(save(model)) round-trips bitwise for float32 models; other dtypes
    are refused rather than silently cast.
    """
    if model.dtype != torch.float32:
        raise ConfigError("checkpoints store little-endian float32 parameters; "
                          f"model dtype is {model.dtype}")
    meta = {
        "format_version": 1,
        "model_config": asdict(model.config),
        "vocab": None if vocab is None else {
            "id_to_token": vocab.id_to_token,
            "frequency": vocab.frequency,
        },
        "extra": extra or {},
    }
    _write_container(path, meta, dict(model.state_dict()))


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, tensors = _read_container(path)
    config = ModelConfig(**header["model_config"])
    vocab = None
    if header.get("vocab"):
        id_to_token = header["vocab"]["id_to_token"]
        vocab = Vocab(
            token_to_id={tok: i for i, tok in enumerate(id_to_token)},
            id_to_token=id_to_token,
            frequency={k: int(v) for k, v in header["vocab"]["frequency"].items()},
        )
    return Checkpoint(config=config, state=tensors, vocab=vocab,
                      extra=header.get("extra", {}))


def load_model(path: str | Path) -> tuple[Seq2SeqTransformer, Vocab | None, dict]:
    ckpt = load_checkpoint(path)
    model = Seq2SeqTransformer(ckpt.config, dtype=torch.float32)
    model.load_state_dict(ckpt.state)
    model.eval()
    return model, ckpt.vocab, ckpt.extra
