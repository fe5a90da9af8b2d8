"""Training orchestration.

Trains the negative teacher on the high-entropy subset with plain MLE, then
distills the student on the raw set with the progressive combined objective:
at every step the frozen teacher and the student run a teacher-forced forward
pass on the same batch and the combined loss is weighted by the rise-fall
schedule. Optimization is Adam under the inverse-sqrt warmup learning rate;
the returned checkpoint is the one with the lowest validation loss.

Everything is deterministic given (data, configs, seed): parameter init,
dropout, bucket shuffling and random-target draws all run off seeded
generators derived from the run seed, and the optimizer state round-trips
bitwise through the train-state container.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch

from .corpus import Dataset, DialoguePair, Vocab
from .errors import ArchitectureError, ConfigError, DataError
from .losses import (
    DistillConfig,
    LossBreakdown,
    ScheduleConfig,
    alpha_schedule,
    combined_loss,
    mle_loss,
)
from .model import (
    EncodedBatch,
    ModelConfig,
    Seq2SeqTransformer,
    _read_container,
    _write_container,
    encode_batch,
    init_parameters,
)


@dataclass
class OptimConfig:
    """Optimizer and run-control parameters (d_model mirrors the model's)."""

    d_model: int
    warmup_steps: int = 200
    batch_size: int = 32
    max_steps: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-9
    seed: int = 0
    validation_interval: int = 100
    patience: int = 10

    def __post_init__(self) -> None:
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.d_model < 1 or self.max_steps < 1 or self.validation_interval < 1:
            raise ConfigError("d_model, max_steps and validation_interval must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0 (0 disables early stopping)")


def lr_schedule(step: int, config: OptimConfig) -> float:
    """lr = 2 * min(1/sqrt(s), s/sqrt(warmup^3)) / sqrt(d_model), s >= 1."""
    if step < 1:
        raise ConfigError(f"lr_schedule needs step >= 1, got {step}")
    scale = min(step ** -0.5, step * config.warmup_steps ** -1.5)
    return 2.0 * scale / math.sqrt(config.d_model)


@dataclass
class AdamState:
    """First/second moment estimates, keyed by parameter name."""

    step_count: int
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]

    @classmethod
    def for_model(cls, model: Seq2SeqTransformer) -> "AdamState":
        return cls(
            step_count=0,
            exp_avg={n: torch.zeros_like(p) for n, p in model.named_parameters()},
            exp_avg_sq={n: torch.zeros_like(p) for n, p in model.named_parameters()},
        )


def adam_update(model: Seq2SeqTransformer, state: AdamState, lr: float,
                config: OptimConfig) -> None:
    state.step_count += 1
    t = state.step_count
    bias_correction1 = 1.0 - config.adam_beta1 ** t
    bias_correction2 = 1.0 - config.adam_beta2 ** t
    with torch.no_grad():
        for name, param in model.named_parameters():
            grad = param.grad
            if grad is None:
                raise FloatingPointError(f"parameter {name} received no gradient")
            m = state.exp_avg[name]
            v = state.exp_avg_sq[name]
            m.mul_(config.adam_beta1).add_(grad, alpha=1.0 - config.adam_beta1)
            v.mul_(config.adam_beta2).addcmul_(grad, grad, value=1.0 - config.adam_beta2)
            denom = (v / bias_correction2).sqrt_().add_(config.adam_epsilon)
            param.addcdiv_(m, denom, value=-lr / bias_correction1)


def make_batches(pairs: Sequence[DialoguePair], batch_size: int) -> list[list[DialoguePair]]:
    """Length-bucketed batches: sort by (response, query) length, then chunk.

    The epoch shuffle permutes whole buckets only, so batch contents are
    fixed for a dataset and batch size.
    """
    order = sorted(
        range(len(pairs)),
        key=lambda i: (len(pairs[i].response), len(pairs[i].query), i),
    )
    return [
        [pairs[i] for i in order[start:start + batch_size]]
        for start in range(0, len(order), batch_size)
    ]


def split_validation(
    raw_pairs: Sequence[tuple[str, str]], fraction: float, seed: int
) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """Deterministically carve a validation subset out of raw pairs."""
    if not (0.0 < fraction <= 0.5):
        raise ConfigError(f"validation fraction must lie in (0, 0.5], got {fraction}")
    n_valid = max(1, round(fraction * len(raw_pairs)))
    if n_valid >= len(raw_pairs):
        raise DataError("dataset too small to carve a validation split")
    rng = random.Random(seed)
    valid_idx = set(rng.sample(range(len(raw_pairs)), n_valid))
    train = [p for i, p in enumerate(raw_pairs) if i not in valid_idx]
    valid = [p for i, p in enumerate(raw_pairs) if i in valid_idx]
    return train, valid


@dataclass
class ValidationRecord:
    step: int
    train_loss: float
    valid_loss: float
    alpha: float
    lr: float
    mle: float
    pred: float
    hidden: float
    attention: float


@dataclass
class TrainResult:
    """Best-validation model plus the run's bookkeeping."""

    model: Seq2SeqTransformer
    best_valid_loss: float
    best_step: int
    steps_run: int
    history: list[ValidationRecord]
    alpha_log: list[float]
    stopped_early: bool


def _clone_state(model: Seq2SeqTransformer) -> dict[str, torch.Tensor]:
    return {name: tensor.detach().clone() for name, tensor in model.state_dict().items()}


def _evaluate(model: Seq2SeqTransformer, batches: list[EncodedBatch],
              smoothing: float) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in batches:
            loss = mle_loss(model.forward_trace(batch, mode="eval"),
                            batch.targets, smoothing)
            total += float(loss) * len(batch)
            count += len(batch)
    return total / count


def _rng_state_to_json(rng: random.Random) -> list:
    version, internal, gauss = rng.getstate()
    return [version, list(internal), gauss]


def _rng_state_from_json(data: list) -> tuple:
    return (data[0], tuple(data[1]), data[2])


class _Loop:
    """Mutable loop state; serializable for bitwise-identical resumption."""

    def __init__(self, optim: OptimConfig, n_batches: int):
        self.step = 0
        self.epoch_order: list[int] = []
        self.position = n_batches  # forces a fresh epoch on first use
        self.batch_rng = random.Random(optim.seed + 2)
        self.target_rng = random.Random(optim.seed + 3)
        self.best_valid = math.inf
        self.best_step = 0
        self.bad_validations = 0
        self.stopped_early = False

    def next_batch_index(self, n_batches: int) -> int:
        if self.position >= len(self.epoch_order):
            self.epoch_order = list(range(n_batches))
            self.batch_rng.shuffle(self.epoch_order)
            self.position = 0
        index = self.epoch_order[self.position]
        self.position += 1
        return index


def save_train_state(path: str | Path, model: Seq2SeqTransformer, adam: AdamState,
                     loop: _Loop, best_state: dict[str, torch.Tensor] | None,
                     vocab: Vocab | None = None) -> None:
    """Serialize everything needed to continue training bitwise-identically."""
    if model.dtype != torch.float32:
        raise ConfigError("train state stores float32 tensors only")
    tensors: dict[str, torch.Tensor] = {}
    for name, tensor in model.state_dict().items():
        tensors[f"param.{name}"] = tensor
    for name, tensor in adam.exp_avg.items():
        tensors[f"adam.m.{name}"] = tensor
    for name, tensor in adam.exp_avg_sq.items():
        tensors[f"adam.v.{name}"] = tensor
    if best_state is not None:
        for name, tensor in best_state.items():
            tensors[f"best.{name}"] = tensor
    if model.dropout_generator is not None:
        tensors["rng.dropout"] = model.dropout_generator.get_state()
    meta = {
        "format_version": 1,
        "kind": "train_state",
        "model_config": asdict(model.config),
        "vocab": None if vocab is None else {
            "id_to_token": vocab.id_to_token,
            "frequency": vocab.frequency,
        },
        "extra": {
            "adam_step_count": adam.step_count,
            "step": loop.step,
            "epoch_order": loop.epoch_order,
            "position": loop.position,
            "batch_rng": _rng_state_to_json(loop.batch_rng),
            "target_rng": _rng_state_to_json(loop.target_rng),
            "best_valid": None if math.isinf(loop.best_valid) else loop.best_valid,
            "best_step": loop.best_step,
            "bad_validations": loop.bad_validations,
            "has_best": best_state is not None,
            "has_dropout_rng": model.dropout_generator is not None,
        },
    }
    _write_container(path, meta, tensors)


def _restore_train_state(path: str | Path, model: Seq2SeqTransformer,
                         adam: AdamState, loop: _Loop
                         ) -> dict[str, torch.Tensor] | None:
    header, tensors = _read_container(path)
    if header.get("kind") != "train_state":
        raise ConfigError(f"{path}: not a train-state container")
    if ModelConfig(**header["model_config"]) != model.config:
        raise ArchitectureError(f"{path}: train state was written for a different model")
    extra = header["extra"]
    model.load_state_dict(
        {n[len("param."):]: t for n, t in tensors.items() if n.startswith("param.")}
    )
    for name in adam.exp_avg:
        adam.exp_avg[name] = tensors[f"adam.m.{name}"]
        adam.exp_avg_sq[name] = tensors[f"adam.v.{name}"]
    adam.step_count = extra["adam_step_count"]
    loop.step = extra["step"]
    loop.epoch_order = list(extra["epoch_order"])
    loop.position = extra["position"]
    loop.batch_rng.setstate(_rng_state_from_json(extra["batch_rng"]))
    loop.target_rng.setstate(_rng_state_from_json(extra["target_rng"]))
    loop.best_valid = math.inf if extra["best_valid"] is None else extra["best_valid"]
    loop.best_step = extra["best_step"]
    loop.bad_validations = extra["bad_validations"]
    if extra["has_dropout_rng"]:
        model.dropout_generator.set_state(tensors["rng.dropout"])
    if extra["has_best"]:
        return {n[len("best."):]: t for n, t in tensors.items() if n.startswith("best.")}
    return None


def _train_loop(
    train_set: Dataset,
    valid_set: Dataset,
    model_config: ModelConfig,
    optim: OptimConfig,
    *,
    teacher: Seq2SeqTransformer | None = None,
    schedule: ScheduleConfig | None = None,
    distill: DistillConfig | None = None,
    label_smoothing: float = 0.1,
    negative_pool: Sequence[Sequence[int]] | None = None,
    vocab: Vocab | None = None,
    log_path: str | Path | None = None,
    state_path: str | Path | None = None,
    state_interval: int | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    if not train_set.pairs:
        raise DataError("training set is empty")
    if not valid_set.pairs:
        raise DataError("validation set is empty")
    model = init_parameters(model_config, optim.seed)
    model.set_dropout_seed(optim.seed + 1)
    batches = [encode_batch(chunk, model_config.max_sequence_length)
               for chunk in make_batches(train_set.pairs, optim.batch_size)]
    valid_batches = [encode_batch(chunk, model_config.max_sequence_length)
                     for chunk in make_batches(valid_set.pairs, optim.batch_size)]
    adam = AdamState.for_model(model)
    loop = _Loop(optim, len(batches))
    best_state: dict[str, torch.Tensor] | None = None
    if resume_from is not None:
        best_state = _restore_train_state(resume_from, model, adam, loop)

    history: list[ValidationRecord] = []
    alpha_log: list[float] = []
    log_file = None
    writer = None
    if log_path is not None:
        fresh = resume_from is None or not Path(log_path).exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["step", "train_loss", "valid_loss", "alpha", "lr",
                             "mle", "pred", "hidden", "attention"])

    try:
        while loop.step < optim.max_steps and not loop.stopped_early:
            batch = batches[loop.next_batch_index(len(batches))]
            loop.step += 1
            step = loop.step
            alpha = alpha_schedule(step, schedule) if schedule is not None else 0.0
            alpha_log.append(alpha)
            lr = lr_schedule(step, optim)
            student_trace = model.forward_trace(batch, mode="train")
            if teacher is not None and alpha > 0.0:
                with torch.no_grad():
                    teacher_trace = teacher.forward_trace(batch, mode="eval")
                total, breakdown = combined_loss(
                    student_trace, teacher_trace, batch.targets, alpha, distill,
                    rng=loop.target_rng, negative_pool=negative_pool,
                )
            else:
                total = mle_loss(student_trace, batch.targets, label_smoothing)
                raw = float(total.detach())
                breakdown = LossBreakdown(
                    alpha=alpha, total=raw, mle=raw,
                    pred=None, hidden=None, attention=None,
                    mle_contribution=raw, pred_contribution=0.0,
                    hidden_contribution=0.0, attention_contribution=0.0,
                )
            if not bool(torch.isfinite(total)):
                raise FloatingPointError(f"non-finite training loss at step {step}")
            for param in model.parameters():
                param.grad = None
            total.backward()
            adam_update(model, adam, lr, optim)

            if step % optim.validation_interval == 0 or step == optim.max_steps:
                valid_loss = _evaluate(model, valid_batches, label_smoothing)
                record = ValidationRecord(
                    step=step, train_loss=float(total.detach()), valid_loss=valid_loss,
                    alpha=alpha, lr=lr,
                    mle=breakdown.mle_contribution,
                    pred=breakdown.pred_contribution,
                    hidden=breakdown.hidden_contribution,
                    attention=breakdown.attention_contribution,
                )
                history.append(record)
                if writer is not None:
                    writer.writerow([record.step, repr(record.train_loss),
                                     repr(record.valid_loss), repr(record.alpha),
                                     repr(record.lr), repr(record.mle),
                                     repr(record.pred), repr(record.hidden),
                                     repr(record.attention)])
                    log_file.flush()
                if valid_loss < loop.best_valid:
                    loop.best_valid = valid_loss
                    loop.best_step = step
                    loop.bad_validations = 0
                    best_state = _clone_state(model)
                else:
                    loop.bad_validations += 1
                    if optim.patience and loop.bad_validations >= optim.patience:
                        loop.stopped_early = True
            if state_path is not None and state_interval and step % state_interval == 0:
                save_train_state(state_path, model, adam, loop, best_state, vocab)
    finally:
        if log_file is not None:
            log_file.close()

    if best_state is None:
        best_state = _clone_state(model)
        loop.best_step = loop.step
    best_model = Seq2SeqTransformer(model_config, dtype=torch.float32)
    best_model.load_state_dict(best_state)
    best_model.eval()
    return TrainResult(
        model=best_model,
        best_valid_loss=loop.best_valid,
        best_step=loop.best_step,
        steps_run=loop.step,
        history=history,
        alpha_log=alpha_log,
        stopped_early=loop.stopped_early,
    )


def train_mle(train_set: Dataset, valid_set: Dataset, model_config: ModelConfig,
              optim_config: OptimConfig, *, label_smoothing: float = 0.1,
              vocab: Vocab | None = None, log_path: str | Path | None = None,
              state_path: str | Path | None = None, state_interval: int | None = None,
              resume_from: str | Path | None = None) -> TrainResult:
    """Plain MLE training (the Standard baseline and the teacher's recipe)."""
    return _train_loop(
        train_set, valid_set, model_config, optim_config,
        label_smoothing=label_smoothing, vocab=vocab, log_path=log_path,
        state_path=state_path, state_interval=state_interval, resume_from=resume_from,
    )


def train_teacher(negative_set: Dataset, valid_set: Dataset, model_config: ModelConfig,
                  optim_config: OptimConfig, **kwargs) -> TrainResult:
    """Train the negative teacher: MLE on the high-entropy (negative) subset.

    The returned model deliberately exemplifies generic-response behavior;
    selection is at the lowest validation loss like any other run.
    """
    return train_mle(negative_set, valid_set, model_config, optim_config, **kwargs)


def distill_student(raw_set: Dataset, teacher: Seq2SeqTransformer,
                    model_config: ModelConfig, optim_config: OptimConfig,
                    schedule_config: ScheduleConfig, distill_config: DistillConfig,
                    valid_set: Dataset, *,
                    negative_pool: Sequence[Sequence[int]] | None = None,
                    vocab: Vocab | None = None,
                    log_path: str | Path | None = None,
                    state_path: str | Path | None = None,
                    state_interval: int | None = None,
                    resume_from: str | Path | None = None) -> TrainResult:
    """Distill the student on the raw set against the frozen negative teacher.

    Each step weighs MLE against the negative-distillation terms with
    alpha_schedule(step). The teacher runs in eval mode under no_grad and its
    parameters never change. With a peak_scale of 0 every alpha is exactly 0
    and the run is numerically identical to train_mle under the same seed.
    """
    if teacher is not None and teacher.config != model_config:
        raise ArchitectureError(
            "teacher and student must share the same architecture; "
            f"teacher={teacher.config} student={model_config}"
        )
    if distill_config.target_mode == "random" and not negative_pool:
        raise ConfigError("random target mode needs negative_pool responses")
    return _train_loop(
        raw_set, valid_set, model_config, optim_config,
        teacher=teacher, schedule=schedule_config, distill=distill_config,
        label_smoothing=distill_config.label_smoothing,
        negative_pool=negative_pool, vocab=vocab, log_path=log_path,
        state_path=state_path, state_interval=state_interval, resume_from=resume_from,
    )
