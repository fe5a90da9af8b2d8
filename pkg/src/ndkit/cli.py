"""Command-line entry point.

One binary, six subcommands covering the whole pipeline:

    synth          emit a synthetic many-to-one corpus (TSV)
    filter         entropy-rank a corpus and split off the negative subset
    train-teacher  MLE-train the negative teacher on the negative subset
    distill        train a student against a frozen teacher (peak_scale 0
                   gives the plain MLE baseline)
    generate       greedy/beam decode a query file with a trained model
    evaluate       score hypotheses against references (JSON report + table)

Training commands read a flat `key = value` config file; unknown keys are
rejected. Every run writes a manifest JSON next to its outputs echoing the
resolved configuration. Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .corpus import (
    Dataset,
    Vocab,
    build_vocab,
    normalize,
    normalized_string,
    read_pairs_tsv,
    rank_and_split,
    source_entropy,
    tokenize,
    write_pairs_tsv,
)
from .decoding import DecodeConfig, decode_file
from .errors import (
    ConfigError,
    DataError,
    ToolkitError,
    UndefinedMeanError,
    UndefinedMetricError,
)
from .losses import DistillConfig, ScheduleConfig
from .metrics import compute_report
from .model import ModelConfig, load_model, save_checkpoint
from .synth import generate_synthetic_corpus
from .training import (
    OptimConfig,
    distill_student,
    split_validation,
    train_mle,
)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(path: Path, command: str, seed: int | None, config: dict,
                   inputs: dict, outputs: dict, started: str) -> None:
    manifest = {
        "command": command,
        "toolkit_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "started_at": started,
        "finished_at": _now(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_config(path: str | Path, schema: dict) -> dict:
    """Flat `key = value` file; blank lines and # comments allowed.

    `schema` maps key -> (parser, default); unknown keys are errors, and so
    are repeated keys.
    """
    resolved = {key: default for key, (_, default) in schema.items()}
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in schema:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
            seen.add(key)
            parser, _ = schema[key]
            try:
                resolved[key] = parser(raw)
            except ToolkitError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return resolved


_MODEL_KEYS = {
    "num_encoder_layers": (int, 2),
    "num_decoder_layers": (int, 2),
    "num_heads": (int, 2),
    "d_model": (int, 16),
    "d_ff": (int, 32),
    "d_k": (int, 8),
    "max_sequence_length": (int, 64),
    "dropout_rate": (float, 0.1),
}

_OPTIM_KEYS = {
    "batch_size": (int, 32),
    "warmup_steps": (int, 200),
    "max_steps": (int, 5000),
    "validation_interval": (int, 100),
    "patience": (int, 10),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "adam_epsilon": (float, 1e-9),
}

_DATA_KEYS = {
    "train_data": (str, None),
    "valid_data": (str, None),
    "valid_fraction": (float, 0.1),
    "vocab_data": (str, None),
    "max_vocab": (int, 8000),
    "out_dir": (str, None),
    "seed": (int, 0),
    "label_smoothing": (float, 0.1),
}

_DISTILL_KEYS = {
    "teacher_checkpoint": (str, None),
    "peak_scale": (float, 4.0),
    "steepness": (float, None),
    "center_step": (float, None),
    "fixed_alpha": (float, None),
    "temperature": (float, 1.0),
    "include_pred": (_parse_bool, True),
    "include_hidden": (_parse_bool, True),
    "include_attention": (_parse_bool, True),
    "target_mode": (str, "soft"),
    "negative_data": (str, None),
    "exclude_data": (str, None),
}


def _require(config: dict, key: str) -> str:
    if not config.get(key):
        raise ConfigError(f"config key {key!r} is required")
    return config[key]


def _load_train_valid(config: dict) -> tuple[list, list]:
    train_pairs = read_pairs_tsv(_require(config, "train_data"))
    if config["valid_data"]:
        valid_pairs = read_pairs_tsv(config["valid_data"])
    else:
        train_pairs, valid_pairs = split_validation(
            train_pairs, config["valid_fraction"], config["seed"])
    return train_pairs, valid_pairs


def _model_config(config: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        num_encoder_layers=config["num_encoder_layers"],
        num_decoder_layers=config["num_decoder_layers"],
        num_heads=config["num_heads"],
        d_model=config["d_model"],
        d_ff=config["d_ff"],
        d_k=config["d_k"],
        max_sequence_length=config["max_sequence_length"],
        dropout_rate=config["dropout_rate"],
    )


def _optim_config(config: dict, d_model: int) -> OptimConfig:
    return OptimConfig(
        d_model=d_model,
        warmup_steps=config["warmup_steps"],
        batch_size=config["batch_size"],
        max_steps=config["max_steps"],
        adam_beta1=config["adam_beta1"],
        adam_beta2=config["adam_beta2"],
        adam_epsilon=config["adam_epsilon"],
        seed=config["seed"],
        validation_interval=config["validation_interval"],
        patience=config["patience"],
    )


def cmd_synth(args: argparse.Namespace) -> int:
    started = _now()
    pairs = generate_synthetic_corpus(
        args.templates, args.queries, args.generic_ratio, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pairs_tsv(out, pairs)
    config = {"templates": args.templates, "queries": args.queries,
              "generic_ratio": args.generic_ratio}
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "synth",
                   args.seed, config, {}, {"corpus": str(out)}, started)
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    started = _now()
    raw_pairs = read_pairs_tsv(args.data)
    vocab = build_vocab([text for pair in raw_pairs for text in pair], args.max_vocab)
    dataset = Dataset.from_raw_pairs(raw_pairs, vocab, split="train")
    table = source_entropy(dataset)
    negative, remaining = rank_and_split(dataset, table, args.ratio)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_pairs_tsv(outdir / "negative.tsv", negative.pairs)
    write_pairs_tsv(outdir / "remaining.tsv", remaining.pairs)
    table.export_tsv(outdir / "entropy.tsv")
    write_manifest(
        outdir / "manifest.json", "filter", None,
        {"ratio": args.ratio, "max_vocab": args.max_vocab},
        {"data": str(args.data)},
        {"negative": str(outdir / "negative.tsv"),
         "remaining": str(outdir / "remaining.tsv"),
         "entropy_table": str(outdir / "entropy.tsv")},
        started,
    )
    print(f"negative: {len(negative.pairs)} pairs, remaining: {len(remaining.pairs)} pairs")
    return 0


def cmd_train_teacher(args: argparse.Namespace) -> int:
    started = _now()
    schema = {**_DATA_KEYS, **_MODEL_KEYS, **_OPTIM_KEYS}
    config = parse_config(args.config, schema)
    outdir = Path(_require(config, "out_dir"))
    outdir.mkdir(parents=True, exist_ok=True)
    train_pairs, valid_pairs = _load_train_valid(config)
    vocab_pairs = (read_pairs_tsv(config["vocab_data"])
                   if config["vocab_data"] else train_pairs)
    vocab = build_vocab([t for pair in vocab_pairs for t in pair], config["max_vocab"])
    train_set = Dataset.from_raw_pairs(train_pairs, vocab, split="train")
    valid_set = Dataset.from_raw_pairs(valid_pairs, vocab, split="valid")
    model_config = _model_config(config, len(vocab))
    optim_config = _optim_config(config, model_config.d_model)
    result = train_mle(
        train_set, valid_set, model_config, optim_config,
        label_smoothing=config["label_smoothing"], vocab=vocab,
        log_path=outdir / "train_log.csv",
    )
    ckpt = outdir / "model.ckpt"
    save_checkpoint(ckpt, result.model, vocab=vocab, extra={
        "role": "teacher", "best_step": result.best_step,
        "best_valid_loss": result.best_valid_loss, "steps_run": result.steps_run,
    })
    write_manifest(outdir / "manifest.json", "train-teacher", config["seed"],
                   config, {"train_data": config["train_data"]},
                   {"checkpoint": str(ckpt), "train_log": str(outdir / "train_log.csv")},
                   started)
    print(f"best validation loss {result.best_valid_loss:.4f} at step "
          f"{result.best_step}; checkpoint {ckpt}")
    return 0


def _exclude_pairs(pairs: list, exclude_path: str) -> list:
    drop = {(normalized_string(q), normalized_string(r))
            for q, r in read_pairs_tsv(exclude_path)}
    kept = [(q, r) for q, r in pairs
            if (normalized_string(q), normalized_string(r)) not in drop]
    if not kept:
        raise DataError("excluding pairs left the training set empty")
    return kept


def cmd_distill(args: argparse.Namespace) -> int:
    started = _now()
    schema = {**_DATA_KEYS, **_MODEL_KEYS, **_OPTIM_KEYS, **_DISTILL_KEYS}
    config = parse_config(args.config, schema)
    outdir = Path(_require(config, "out_dir"))
    outdir.mkdir(parents=True, exist_ok=True)

    distillation_off = (config["peak_scale"] == 0.0
                        and config["fixed_alpha"] in (None, 0.0))
    teacher = teacher_vocab = None
    if config["teacher_checkpoint"]:
        teacher, teacher_vocab, _ = load_model(config["teacher_checkpoint"])
        if teacher_vocab is None:
            raise DataError("teacher checkpoint carries no vocabulary")
    elif not distillation_off:
        raise ConfigError("teacher_checkpoint is required unless distillation "
                          "is disabled (peak_scale = 0)")

    train_pairs, valid_pairs = _load_train_valid(config)
    if config["exclude_data"]:
        train_pairs = _exclude_pairs(train_pairs, config["exclude_data"])
    if teacher_vocab is not None:
        vocab = teacher_vocab
    else:
        vocab_pairs = (read_pairs_tsv(config["vocab_data"])
                       if config["vocab_data"] else train_pairs)
        vocab = build_vocab([t for pair in vocab_pairs for t in pair],
                            config["max_vocab"])
    train_set = Dataset.from_raw_pairs(train_pairs, vocab, split="train")
    valid_set = Dataset.from_raw_pairs(valid_pairs, vocab, split="valid")

    if teacher is not None:
        model_config = ModelConfig(**{**asdict(teacher.config), **{
            key: config[key] for key in _MODEL_KEYS if key in config
        }, "vocab_size": teacher.config.vocab_size})
    else:
        model_config = _model_config(config, len(vocab))
    optim_config = _optim_config(config, model_config.d_model)
    center = config["center_step"] or 2.0 * optim_config.warmup_steps
    steepness = config["steepness"] or 6.0 / center
    schedule = ScheduleConfig(peak_scale=config["peak_scale"], steepness=steepness,
                              center_step=center, fixed_alpha=config["fixed_alpha"])
    distill_config = DistillConfig(
        temperature=config["temperature"],
        include_pred=config["include_pred"],
        include_hidden=config["include_hidden"],
        include_attention=config["include_attention"],
        label_smoothing=config["label_smoothing"],
        target_mode=config["target_mode"],
    )
    negative_pool = None
    if distill_config.target_mode == "random":
        negative_pairs = read_pairs_tsv(_require(config, "negative_data"))
        negative_pool = [tokenize(r, vocab) for _, r in negative_pairs]

    if teacher is not None:
        result = distill_student(
            train_set, teacher, model_config, optim_config, schedule,
            distill_config, valid_set, negative_pool=negative_pool, vocab=vocab,
            log_path=outdir / "train_log.csv",
        )
    else:
        result = train_mle(
            train_set, valid_set, model_config, optim_config,
            label_smoothing=config["label_smoothing"], vocab=vocab,
            log_path=outdir / "train_log.csv",
        )
    ckpt = outdir / "model.ckpt"
    save_checkpoint(ckpt, result.model, vocab=vocab, extra={
        "role": "student", "best_step": result.best_step,
        "best_valid_loss": result.best_valid_loss, "steps_run": result.steps_run,
    })
    resolved = dict(config)
    resolved["center_step"] = center
    resolved["steepness"] = steepness
    write_manifest(outdir / "manifest.json", "distill", config["seed"], resolved,
                   {"train_data": config["train_data"],
                    "teacher_checkpoint": config["teacher_checkpoint"]},
                   {"checkpoint": str(ckpt), "train_log": str(outdir / "train_log.csv")},
                   started)
    print(f"best validation loss {result.best_valid_loss:.4f} at step "
          f"{result.best_step}; checkpoint {ckpt}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    started = _now()
    model, vocab, _ = load_model(args.checkpoint)
    if vocab is None:
        raise DataError("checkpoint carries no vocabulary; cannot tokenize queries")
    config = DecodeConfig(
        strategy=args.strategy, beam_size=args.beam_size,
        length_penalty_exponent=args.length_penalty,
        max_decode_length=args.max_length,
    )
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = decode_file(model, vocab, args.input, out, config)
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "generate", None,
                   {"strategy": config.strategy, "beam_size": config.beam_size,
                    "length_penalty_exponent": config.length_penalty_exponent,
                    "max_decode_length": config.max_decode_length},
                   {"checkpoint": str(args.checkpoint), "queries": str(args.input)},
                   {"responses": str(out)}, started)
    print(f"decoded {count} queries to {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = _now()
    hyp_pairs = read_pairs_tsv(args.hypotheses)
    ref_pairs = read_pairs_tsv(args.references)
    if len(hyp_pairs) != len(ref_pairs):
        raise DataError(f"{len(hyp_pairs)} hypotheses vs {len(ref_pairs)} references")
    for i, ((hq, _), (rq, _)) in enumerate(zip(hyp_pairs, ref_pairs), start=1):
        if normalized_string(hq) != normalized_string(rq):
            raise DataError(f"line {i}: hypothesis and reference queries differ")
    train_pairs = read_pairs_tsv(args.train_data)
    vocab = build_vocab([t for pair in train_pairs for t in pair], args.max_vocab)
    hypotheses = [normalize(r) for _, r in hyp_pairs]
    references = [normalize(r) for _, r in ref_pairs]
    report = compute_report(
        hypotheses, references, vocab,
        lf_threshold=args.lf_threshold, kl_direction=args.kl_direction,
    )
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    print(report.format_table())
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "evaluate", None,
                   report.config,
                   {"hypotheses": str(args.hypotheses),
                    "references": str(args.references),
                    "train_data": str(args.train_data)},
                   {"report": str(out)}, started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ndkit",
        description="Negative-distillation toolkit for dialogue generation",
    )
    parser.add_argument("--version", action="version", version=f"ndkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic many-to-one corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--templates", type=int, default=3)
    p.add_argument("--queries", type=int, default=2000)
    p.add_argument("--generic-ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("filter", help="entropy-rank pairs and split off the negative set")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--max-vocab", type=int, default=50000)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train-teacher", help="MLE-train the negative teacher")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("generate", help="decode a query file with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--strategy", choices=["greedy", "beam"], default="greedy")
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--length-penalty", type=float, default=1.0)
    p.add_argument("--max-length", type=int, default=30)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--train-data", required=True,
                   help="training corpus for LF frequency counts")
    p.add_argument("--max-vocab", type=int, default=50000)
    p.add_argument("--lf-threshold", type=int, default=100)
    p.add_argument("--kl-direction", choices=["ref_to_gen", "gen_to_ref"],
                   default="ref_to_gen")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _fail(code_name: str, exit_code: int, exc: Exception) -> int:
    message = " ".join(str(exc).split())
    print(f"ndkit: error code={code_name}: {message}", file=sys.stderr)
    return exit_code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", 2, exc)
    except (UndefinedMetricError, UndefinedMeanError, FloatingPointError) as exc:
        return _fail("numeric", 4, exc)
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail("data", 3, exc)


if __name__ == "__main__":
    sys.exit(main())
