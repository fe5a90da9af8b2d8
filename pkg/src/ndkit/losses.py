"""Training objectives.

Likelihood (with label smoothing), token-level unlikelihood, positive
knowledge distillation, the three negative-distillation losses (soft
unlikelihood on predictions, reverse-square-error on hidden states and on
pre-softmax attention scores), the combined objective and the rise-fall
weighting schedule shaped like the sigmoid derivative.

Reduction convention: every loss is a mean over a sample's valid target
positions first, then a mean over batch elements, so gradient scale does not
depend on batch shape. Teacher-side tensors are always detached; gradients
flow to the student only.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence

import torch

from .corpus import EOS_ID
from .errors import (
    AlignmentError,
    ArchitectureError,
    ConfigError,
    DataError,
    ShapeError,
    UndefinedMeanError,
)
from .model import ForwardTrace, softmax_with_temperature

CLAMP_EPS = 1e-7

TARGET_MODES = ("soft", "hard", "random")


@dataclass
class DistillConfig:
    """Knobs of the distillation objective, including the ablation toggles."""

    temperature: float = 1.0
    include_pred: bool = True
    include_hidden: bool = True
    include_attention: bool = True
    label_smoothing: float = 0.1
    target_mode: str = "soft"

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not (0.0 <= self.label_smoothing < 0.5):
            raise ConfigError(
                f"label_smoothing must lie in [0, 0.5), got {self.label_smoothing}"
            )
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}")


@dataclass
class ScheduleConfig:
    """Parameters of the rise-fall distillation weight.

    peak_scale scales the sigmoid-derivative bump (peak value is
    peak_scale / 4, reached at center_step); steepness stretches it in time.
    A peak_scale of 0 turns distillation off entirely. When fixed_alpha is
    set the schedule is ignored and that constant weight is used instead.
    """

    peak_scale: float = 4.0
    steepness: float = 6.0 / 400.0
    center_step: float = 400.0
    fixed_alpha: float | None = None

    def __post_init__(self) -> None:
        if self.fixed_alpha is not None:
            if not (0.0 <= self.fixed_alpha <= 1.0):
                raise ConfigError(f"fixed_alpha must lie in [0, 1], got {self.fixed_alpha}")
            return
        if self.peak_scale < 0:
            raise ConfigError(f"peak_scale must be >= 0, got {self.peak_scale}")
        if self.steepness <= 0 or self.center_step <= 0:
            raise ConfigError("steepness and center_step must be positive")


@dataclass
class NegativeCandidateSet:
    """Per-position token ids to penalize for one sequence (unlikelihood)."""

    positions: list[list[int]]

    def __post_init__(self) -> None:
        for ids in self.positions:
            for token_id in ids:
                if token_id < 0:
                    raise DataError(f"negative candidate id {token_id} is invalid")


def _masked_position_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over each sample's valid positions, then over the batch."""
    counts = mask.sum(dim=1)
    if values.numel() == 0 or bool((counts == 0).any()):
        raise UndefinedMeanError("a sample has no unmasked target positions")
    weights = mask.to(values.dtype)
    per_sample = (values * weights).sum(dim=1) / counts.to(values.dtype)
    return per_sample.mean()


def _check_aligned(teacher: ForwardTrace, student: ForwardTrace) -> None:
    if teacher.logits.shape != student.logits.shape:
        raise AlignmentError(
            f"trace logits shapes differ: {tuple(teacher.logits.shape)} vs "
            f"{tuple(student.logits.shape)}"
        )
    if not torch.equal(teacher.target_mask, student.target_mask):
        raise AlignmentError("traces cover different target masks")


def mle_loss(trace: ForwardTrace, targets: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    """Smoothed negative log-likelihood of the targets.

    `smoothing` mass is spread uniformly over the non-target vocabulary
    entries; at 0 this is plain cross-entropy.
    """
    if not (0.0 <= smoothing < 0.5):
        raise ConfigError(f"smoothing must lie in [0, 0.5), got {smoothing}")
    if targets.shape != trace.logits.shape[:2]:
        raise AlignmentError(
            f"targets shape {tuple(targets.shape)} does not match logits "
            f"{tuple(trace.logits.shape[:2])}"
        )
    log_probs = torch.log_softmax(trace.logits, dim=-1)
    target_logp = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if smoothing == 0.0:
        per_position = -target_logp
    else:
        vocab_size = trace.logits.shape[-1]
        rest = log_probs.sum(dim=-1) - target_logp
        per_position = -((1.0 - smoothing) * target_logp
                         + smoothing / (vocab_size - 1) * rest)
    return _masked_position_mean(per_position, trace.target_mask)


def ul_loss(trace: ForwardTrace, candidates: Sequence[NegativeCandidateSet]) -> torch.Tensor:
    """Token-level unlikelihood: -log(1 - p) summed over per-position candidates.

    Candidate probabilities are clamped below 1 - 1e-7 before the log so the
    loss stays finite. Positions without candidates contribute zero but still
    count in the positional mean.
    """
    batch, length, vocab_size = trace.logits.shape
    if len(candidates) != batch:
        raise AlignmentError(f"{len(candidates)} candidate sets for batch of {batch}")
    probs = torch.softmax(trace.logits, dim=-1)
    counts = trace.target_mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise UndefinedMeanError("a sample has no unmasked target positions")
    sample_losses = []
    for b, cand in enumerate(candidates):
        total = trace.logits.new_zeros(())
        for pos, ids in enumerate(cand.positions):
            if pos >= length or not ids or not bool(trace.target_mask[b, pos]):
                continue
            ids = sorted(set(ids))
            if ids[-1] >= vocab_size:
                raise DataError(f"candidate id {ids[-1]} outside vocab of {vocab_size}")
            p = probs[b, pos, ids].clamp(max=1.0 - CLAMP_EPS)
            total = total - torch.log1p(-p).sum()
        sample_losses.append(total / counts[b].to(probs.dtype))
    return torch.stack(sample_losses).mean()


def kd_loss(teacher_trace: ForwardTrace, student_trace: ForwardTrace,
            temperature: float = 1.0) -> torch.Tensor:
    """Positive distillation: cross-entropy from softened teacher to student."""
    _check_aligned(teacher_trace, student_trace)
    teacher_probs = softmax_with_temperature(teacher_trace.logits.detach(), temperature)
    student_logp = torch.log_softmax(student_trace.logits / temperature, dim=-1)
    per_position = -(teacher_probs * student_logp).sum(dim=-1)
    return _masked_position_mean(per_position, student_trace.target_mask)


def _soft_unlikelihood(target_probs: torch.Tensor, student_trace: ForwardTrace,
                       temperature: float) -> torch.Tensor:
    student_probs = softmax_with_temperature(student_trace.logits, temperature)
    log_one_minus = torch.log1p(-student_probs.clamp(max=1.0 - CLAMP_EPS))
    per_position = -(target_probs * log_one_minus).sum(dim=-1)
    return _masked_position_mean(per_position, student_trace.target_mask)


def nd_pred_loss(teacher_trace: ForwardTrace, student_trace: ForwardTrace,
                 temperature: float = 1.0) -> torch.Tensor:
    """Soft unlikelihood on the prediction layer.

    Weights -log(1 - p_student) by the softened probabilities of the negative
    teacher, pushing the student's distribution away from the teacher's.
    """
    _check_aligned(teacher_trace, student_trace)
    targets = softmax_with_temperature(teacher_trace.logits.detach(), temperature)
    return _soft_unlikelihood(targets, student_trace, temperature)


def hard_prediction_targets(teacher_trace: ForwardTrace) -> torch.Tensor:
    """One-hot targets from the teacher's greedy (argmax) predictions."""
    logits = teacher_trace.logits.detach()
    picks = logits.argmax(dim=-1)
    return torch.nn.functional.one_hot(picks, logits.shape[-1]).to(logits.dtype)


def random_prediction_targets(teacher_trace: ForwardTrace,
                              pool: Sequence[Sequence[int]],
                              rng: random.Random) -> torch.Tensor:
    """One-hot targets from responses drawn at random out of the negative set.

    Each batch row gets one sampled response, aligned per position and padded
    with EOS past its end (those positions are usually masked anyway).
    """
    if not pool:
        raise DataError("random target mode needs a non-empty negative response pool")
    logits = teacher_trace.logits
    batch, length, vocab_size = logits.shape
    picks = torch.full((batch, length), EOS_ID, dtype=torch.long)
    for b in range(batch):
        response = pool[rng.randrange(len(pool))]
        for pos in range(min(length, len(response))):
            picks[b, pos] = response[pos]
    return torch.nn.functional.one_hot(picks, vocab_size).to(logits.dtype)


def mrse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean reverse square error: mean over valid elements of exp(-(a-b)^2).

    Equals 1 exactly when a == b and decays towards 0 as features move apart,
    so minimizing it drives the two feature sets apart. Masked elements are
    excluded from both the sum and the count.
    """
    if a.shape != b.shape:
        raise ShapeError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if mask is None:
        mask = torch.ones_like(a, dtype=torch.bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match {tuple(a.shape)}")
    n = int(mask.sum())
    if n == 0:
        raise UndefinedMeanError("mrse over zero valid elements")
    diff = a - b
    values = torch.exp(-(diff * diff))
    return (values * mask.to(a.dtype)).sum() / n


def nd_hidden_loss(teacher_trace: ForwardTrace, student_trace: ForwardTrace) -> torch.Tensor:
    """Reverse-square-error distance of decoder hidden states, summed over layers."""
    if len(teacher_trace.decoder_hidden) != len(student_trace.decoder_hidden):
        raise ArchitectureError(
            f"decoder layer counts differ: {len(teacher_trace.decoder_hidden)} vs "
            f"{len(student_trace.decoder_hidden)}"
        )
    if not torch.equal(teacher_trace.target_mask, student_trace.target_mask):
        raise AlignmentError("traces cover different target masks")
    mask = student_trace.target_mask
    total = student_trace.logits.new_zeros(())
    for teacher_h, student_h in zip(teacher_trace.decoder_hidden,
                                    student_trace.decoder_hidden):
        if teacher_h.shape != student_h.shape:
            raise ArchitectureError(
                f"hidden shapes differ: {tuple(teacher_h.shape)} vs {tuple(student_h.shape)}"
            )
        width = teacher_h.shape[-1]
        counts = mask.sum(dim=1) * width
        if bool((counts == 0).any()):
            raise UndefinedMeanError("a sample has no unmasked positions")
        diff = teacher_h.detach() - student_h
        values = torch.exp(-(diff * diff))
        masked = values * mask[:, :, None].to(values.dtype)
        per_sample = masked.sum(dim=(1, 2)) / counts.to(values.dtype)
        total = total + per_sample.mean()
    return total


def nd_attention_loss(teacher_trace: ForwardTrace, student_trace: ForwardTrace) -> torch.Tensor:
    """Reverse-square-error distance of pre-softmax decoder self-attention scores.

    All heads of a layer pool into one mean; causally masked and padded
    entries are excluded. Summed over decoder layers.
    """
    if len(teacher_trace.decoder_attention) != len(student_trace.decoder_attention):
        raise ArchitectureError(
            f"decoder layer counts differ: {len(teacher_trace.decoder_attention)} vs "
            f"{len(student_trace.decoder_attention)}"
        )
    if not torch.equal(teacher_trace.attention_mask, student_trace.attention_mask):
        raise AlignmentError("traces cover different attention masks")
    mask = student_trace.attention_mask
    total = student_trace.logits.new_zeros(())
    for teacher_a, student_a in zip(teacher_trace.decoder_attention,
                                    student_trace.decoder_attention):
        if teacher_a.shape != student_a.shape:
            raise ArchitectureError(
                f"attention shapes differ: {tuple(teacher_a.shape)} vs "
                f"{tuple(student_a.shape)} (head counts must match)"
            )
        heads = teacher_a.shape[1]
        counts = mask.sum(dim=(1, 2)) * heads
        if bool((counts == 0).any()):
            raise UndefinedMeanError("a sample has no valid attention entries")
        diff = teacher_a.detach() - student_a
        values = torch.exp(-(diff * diff))
        masked = values * mask[:, None, :, :].to(values.dtype)
        per_sample = masked.sum(dim=(1, 2, 3)) / counts.to(values.dtype)
        total = total + per_sample.mean()
    return total


def alpha_schedule(step: int, config: ScheduleConfig) -> float:
    """Distillation weight at a training step: a scaled sigmoid derivative.

    alpha = peak_scale * e^{-z} / (e^{-z} + 1)^2 with
    z = steepness * (step - center_step); even in z, peaking at
    peak_scale / 4 when step == center_step. A set fixed_alpha wins
    unconditionally.
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if config.fixed_alpha is not None:
        return float(config.fixed_alpha)
    z = config.steepness * (step - config.center_step)
    u = math.exp(-abs(z))
    return config.peak_scale * u / (1.0 + u) ** 2


@dataclass
class LossBreakdown:
    """Component values of one combined-loss evaluation.

    The *_contribution fields are the addends of the total (already weighted
    by alpha); they sum to `total` in the exact order mle, pred, hidden,
    attention. Raw component values are None when a term was not computed.
    """

    alpha: float
    total: float
    mle: float
    pred: float | None
    hidden: float | None
    attention: float | None
    mle_contribution: float
    pred_contribution: float
    hidden_contribution: float
    attention_contribution: float

    def contributions(self) -> tuple[float, float, float, float]:
        return (self.mle_contribution, self.pred_contribution,
                self.hidden_contribution, self.attention_contribution)


def combined_loss(student_trace: ForwardTrace, teacher_trace: ForwardTrace | None,
                  targets: torch.Tensor, alpha: float, config: DistillConfig,
                  rng: random.Random | None = None,
                  negative_pool: Sequence[Sequence[int]] | None = None,
                  ) -> tuple[torch.Tensor, LossBreakdown]:
    """(1 - alpha) * MLE + alpha * (pred + hidden + attention) with toggles.

    Terms whose toggle is off (or with alpha == 0) are skipped entirely and
    contribute an exact zero; the summation order is fixed so the breakdown's
    contributions reproduce the total bitwise.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    mle_raw = mle_loss(student_trace, targets, config.label_smoothing)
    mle_term = (1.0 - alpha) * mle_raw
    pred_raw = hidden_raw = attention_raw = None
    zero = student_trace.logits.new_zeros(())
    pred_term = hidden_term = attention_term = zero
    if alpha > 0.0 and (config.include_pred or config.include_hidden
                        or config.include_attention):
        if teacher_trace is None:
            raise ConfigError("combined loss with alpha > 0 needs a teacher trace")
        if config.include_pred:
            if config.target_mode == "soft":
                pred_raw = nd_pred_loss(teacher_trace, student_trace, config.temperature)
            elif config.target_mode == "hard":
                _check_aligned(teacher_trace, student_trace)
                targets_probs = hard_prediction_targets(teacher_trace)
                pred_raw = _soft_unlikelihood(targets_probs, student_trace,
                                              config.temperature)
            else:
                if rng is None:
                    raise ConfigError("random target mode needs an rng")
                targets_probs = random_prediction_targets(
                    teacher_trace, negative_pool or [], rng)
                pred_raw = _soft_unlikelihood(targets_probs, student_trace,
                                              config.temperature)
            pred_term = alpha * pred_raw
        if config.include_hidden:
            hidden_raw = nd_hidden_loss(teacher_trace, student_trace)
            hidden_term = alpha * hidden_raw
        if config.include_attention:
            attention_raw = nd_attention_loss(teacher_trace, student_trace)
            attention_term = alpha * attention_raw
    total = mle_term + pred_term + hidden_term + attention_term

    def scalar(value: torch.Tensor) -> float:
        return float(value.detach())

    breakdown = LossBreakdown(
        alpha=alpha,
        total=scalar(total),
        mle=scalar(mle_raw),
        pred=None if pred_raw is None else scalar(pred_raw),
        hidden=None if hidden_raw is None else scalar(hidden_raw),
        attention=None if attention_raw is None else scalar(attention_raw),
        mle_contribution=scalar(mle_term),
        pred_contribution=scalar(pred_term),
        hidden_contribution=scalar(hidden_term),
        attention_contribution=scalar(attention_term),
    )
    return total, breakdown
