"""Command-line harness: build-data, train-toy, predict-toy, eval, ablate-rank.

Every command resolves its configuration as CLI flags over config-file
values over built-in defaults, writes the merged config next to its
outputs, and is a pure function of (inputs, config, seed): re-running
reproduces outputs byte for byte. Exit codes: 0 success, 1 internal
error, 2 input-validation error.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from . import checkpoint, report as rpt, task as toytask, train as training
from .data import emit_dataset, load_annotations, load_predictions
from .errors import InputError, KploraError
from .grammar import parse_prediction
from .lora import LoraConfig
from .metrics import evaluate_dataset
from .model import ModelConfig, ToyModel, build_echo_base, generate
from .vocab import EOS, Vocab

OUT_ROOT_ENV = "KPLORA_OUT_ROOT"

# Seed derivation offsets: one master seed drives independent streams.
SEED_ADAPTERS = 1
SEED_TRAINING = 2
SEED_CORPUS = 3
SEED_EVAL_CORPUS = 4


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ("query", "key", "value", "output")
    epochs: int = 2
    batch_size: int = 16
    learning_rate: float = 3e-3
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    n_train: int = 1500
    n_eval: int = 200
    max_new_tokens: int = 110
    pck_alphas: tuple[float, ...] = (0.05, 0.10)
    policy: str = "recover"
    pad_short: bool = False
    skip_unmatched: bool = False


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then config-file values, then non-None CLI overrides."""
    values = dataclasses.asdict(RunConfig())
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as e:
            raise InputError(f"cannot read config {config_path}: {e}") from e
        except json.JSONDecodeError as e:
            raise InputError(f"config {config_path} is not valid JSON: {e}") from e
        loaded.pop("command", None)  # provenance field in emitted configs
        unknown = set(loaded) - set(values)
        if unknown:
            raise InputError(f"config {config_path}: unknown keys {sorted(unknown)}")
        values.update(loaded)
    for key, val in overrides.items():
        if val is not None and val != ():
            values[key] = val
    for key in ("targets", "pck_alphas"):
        values[key] = tuple(values[key])
    return RunConfig(**values)


def write_config(cfg: RunConfig, out_dir: Path, command: str) -> None:
    payload = {"command": command, **dataclasses.asdict(cfg)}
    rpt.write_json(payload, out_dir / "config.json")


def default_out(command: str, out: str | None) -> Path:
    if out is not None:
        return Path(out)
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    return root / command


def cli_errors(fn):
    """Map package errors to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        except (KploraError, OSError) as e:
            click.echo(f"internal error: {e}", err=True)
            sys.exit(1)

    return wrapper


def config_options(fn):
    for decorator in reversed(
        [
            click.option("--config", "config_path", type=click.Path(), default=None,
                         help="JSON config file; CLI flags override it."),
            click.option("--seed", type=int, default=None),
            click.option("--rank", type=int, default=None),
            click.option("--alpha", type=float, default=None),
            click.option("--dropout", type=float, default=None),
            click.option("--epochs", type=int, default=None),
            click.option("--batch-size", type=int, default=None),
            click.option("--learning-rate", type=float, default=None),
            click.option("--n-train", type=int, default=None),
            click.option("--n-eval", type=int, default=None),
        ]
    ):
        fn = decorator(fn)
    return fn


@click.group()
def main():
    """Keypoint instruction datasets, coordinate-text parsing and scoring,
    and a LoRA-adapted toy language model."""


# -- build-data -------------------------------------------------------------


@main.command("build-data")
@click.argument("annotations", type=click.Path())
@click.option("--out", type=click.Path(), default=None, help="Output JSONL path.")
@cli_errors
def cmd_build_data(annotations, out):
    """Convert keypoint annotations into instruction-tuning JSONL."""
    if out is None:
        out_path = default_out("build-data", None) / "dataset.jsonl"
    else:
        out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    samples = load_annotations(annotations)
    stats = emit_dataset(samples, out_path)
    click.echo(f"wrote {out_path} records={stats.records} instances={stats.instances}")


# -- train-toy ---------------------------------------------------------------


def _build_toy_model(cfg: RunConfig) -> ToyModel:
    vocab = Vocab()
    mcfg = ModelConfig(
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        max_seq_len=cfg.max_seq_len,
        vocab_size=vocab.size,
    )
    return build_echo_base(mcfg, toytask.OBSERVATION_SPAN, seed=cfg.seed)


@main.command("train-toy")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@config_options
@cli_errors
def cmd_train_toy(out, config_path, **overrides):
    """LoRA-fine-tune the toy model on the synthetic scene task."""
    cfg = resolve_config(config_path, overrides)
    out_dir = default_out("train-toy", out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir, "train-toy")

    vocab = Vocab()
    model = _build_toy_model(cfg)
    model.attach_adapters(
        LoraConfig(rank=cfg.rank, alpha=cfg.alpha, dropout=cfg.dropout,
                   targets=cfg.targets),
        seed=cfg.seed + SEED_ADAPTERS,
    )
    corpus = toytask.make_toy_task(cfg.n_train, seed=cfg.seed + SEED_CORPUS)
    ids, targets, mask = toytask.encode_sequences(corpus, vocab)
    state = training.TrainingState.for_model(
        model, learning_rate=cfg.learning_rate, seed=cfg.seed + SEED_TRAINING
    )
    losses = training.train(
        model, ids, targets, mask,
        epochs=cfg.epochs, batch_size=cfg.batch_size, state=state,
        log_path=out_dir / "train_log.csv",
    )
    checkpoint.save_model(model, out_dir / "checkpoint.bin")
    rpt.loss_curve_figure(out_dir / "train_log.csv", out_dir / "loss_curve.png")
    click.echo(
        f"trained {state.step} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
        f"trainable params {model.trainable_parameter_count():,} "
        f"of {model.base_parameter_count():,} total"
    )


# -- predict-toy --------------------------------------------------------------


@main.command("predict-toy")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--frozen", is_flag=True, default=False,
              help="Drop the adapters and decode with the base model only.")
@config_options
@cli_errors
def cmd_predict_toy(checkpoint_path, out, frozen, config_path, **overrides):
    """Generate predictions for a held-out slice of the toy task."""
    cfg = resolve_config(config_path, overrides)
    out_dir = default_out("predict-toy", out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir, "predict-toy")

    vocab = Vocab()
    model = checkpoint.load_model(checkpoint_path)
    if frozen:
        model.adapters = {}
        model.lora_config = None
    held_out = toytask.make_toy_task(cfg.n_eval, seed=cfg.seed + SEED_EVAL_CORPUS)
    prompts = toytask.prompt_ids(held_out, vocab)
    generated = generate(model, prompts, cfg.max_new_tokens, EOS)
    with (out_dir / "predictions.jsonl").open("w", encoding="utf-8") as f:
        for sample, ids in zip(held_out, generated):
            f.write(json.dumps(
                {"sample_id": sample.sample_id, "output": vocab.detokenize(ids)}
            ))
            f.write("\n")
    toytask.write_toy_annotations(held_out, out_dir / "ground_truth.json")
    rpt.write_json(
        {
            "label": "frozen-base" if frozen else f"lora-r{model.lora_config.rank}"
            if model.lora_config else "base",
            "trainable_params": model.trainable_parameter_count(),
            "frozen": frozen,
        },
        out_dir / "meta.json",
    )
    click.echo(f"wrote {out_dir / 'predictions.jsonl'} ({len(held_out)} samples)")


# -- eval ---------------------------------------------------------------------


@main.command("eval")
@click.option("--predictions", type=click.Path(), required=True)
@click.option("--ground-truth", "ground_truth", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--pck-alpha", "pck_alphas", type=float, multiple=True,
              help="PCK threshold; repeatable.")
@click.option("--policy", type=click.Choice(["strict", "recover"]), default=None)
@click.option("--pad-short", is_flag=True, default=None,
              help="Pad short instances by repeating their last pair.")
@click.option("--skip-unmatched", is_flag=True, default=None,
              help="Exclude unmatched ground-truth instances from the metrics.")
@click.option("--label", type=str, default=None, help="Row label for the table.")
@click.option("--trainable-params", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@cli_errors
def cmd_eval(predictions, ground_truth, out, pck_alphas, policy, pad_short,
             skip_unmatched, label, trainable_params, config_path):
    """Score a prediction file against ground-truth annotations."""
    cfg = resolve_config(config_path, {
        "pck_alphas": tuple(pck_alphas),
        "policy": policy,
        "pad_short": pad_short,
        "skip_unmatched": skip_unmatched,
    })
    out_dir = default_out("eval", out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir, "eval")

    gt_samples = load_annotations(ground_truth)
    records = load_predictions(predictions)
    parsed = {}
    for rec in records:
        sid = rec["sample_id"]
        if sid in parsed:
            raise InputError(f"{predictions}: duplicate sample_id {sid!r}")
        result = parse_prediction(
            rec["output"], policy=cfg.policy, pad_short=cfg.pad_short
        )
        parsed[sid] = result.instances
    eval_report = evaluate_dataset(
        parsed,
        gt_samples,
        pck_alphas=cfg.pck_alphas,
        unmatched_policy="skip" if cfg.skip_unmatched else "penalize",
    )
    row = rpt.report_to_dict(eval_report, label or "model", trainable_params)
    rpt.write_json(row, out_dir / "report.json")
    table = rpt.comparison_table([row])
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    rpt.per_class_figure(eval_report, out_dir / "per_class.png")
    click.echo(table, nl=False)


# -- ablate-rank ----------------------------------------------------------------


@main.command("ablate-rank")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--ranks", type=int, multiple=True, help="Ranks to sweep; repeatable.")
@config_options
@cli_errors
def cmd_ablate_rank(out, ranks, config_path, **overrides):
    """Sweep LoRA ranks: train, predict, and score each one."""
    cfg = resolve_config(config_path, overrides)
    ranks = tuple(ranks) or (4, 8, 16)
    out_dir = default_out("ablate-rank", out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir, "ablate-rank")

    rows = []
    for rank in ranks:
        rank_cfg = dataclasses.replace(cfg, rank=rank)
        rank_dir = out_dir / f"rank-{rank}"
        rank_dir.mkdir(parents=True, exist_ok=True)
        rows.append(_run_rank(rank_cfg, rank_dir))

    rpt.write_json(rows, out_dir / "ablation.json")
    table = rpt.ablation_table(rows)
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
    rpt.ablation_figure(rows, out_dir / "ablation.png")
    click.echo(table, nl=False)


def _run_rank(cfg: RunConfig, rank_dir: Path) -> dict:
    """One ablation leg: train, predict held-out, evaluate."""
    vocab = Vocab()
    write_config(cfg, rank_dir, "ablate-rank/train-toy")
    model = _build_toy_model(cfg)
    model.attach_adapters(
        LoraConfig(rank=cfg.rank, alpha=cfg.alpha, dropout=cfg.dropout,
                   targets=cfg.targets),
        seed=cfg.seed + SEED_ADAPTERS,
    )
    corpus = toytask.make_toy_task(cfg.n_train, seed=cfg.seed + SEED_CORPUS)
    ids, targets, mask = toytask.encode_sequences(corpus, vocab)
    state = training.TrainingState.for_model(
        model, learning_rate=cfg.learning_rate, seed=cfg.seed + SEED_TRAINING
    )
    training.train(
        model, ids, targets, mask,
        epochs=cfg.epochs, batch_size=cfg.batch_size, state=state,
        log_path=rank_dir / "train_log.csv",
    )
    checkpoint.save_model(model, rank_dir / "checkpoint.bin")

    held_out = toytask.make_toy_task(cfg.n_eval, seed=cfg.seed + SEED_EVAL_CORPUS)
    prompts = toytask.prompt_ids(held_out, vocab)
    generated = generate(model, prompts, cfg.max_new_tokens, EOS)
    with (rank_dir / "predictions.jsonl").open("w", encoding="utf-8") as f:
        for sample, out_ids in zip(held_out, generated):
            f.write(json.dumps(
                {"sample_id": sample.sample_id, "output": vocab.detokenize(out_ids)}
            ))
            f.write("\n")
    toytask.write_toy_annotations(held_out, rank_dir / "ground_truth.json")

    parsed = {
        s.sample_id: parse_prediction(
            vocab.detokenize(out_ids), policy=cfg.policy, pad_short=cfg.pad_short
        ).instances
        for s, out_ids in zip(held_out, generated)
    }
    eval_report = evaluate_dataset(
        parsed,
        toytask.toy_ground_truth(held_out),
        pck_alphas=cfg.pck_alphas,
        unmatched_policy="skip" if cfg.skip_unmatched else "penalize",
    )
    row = rpt.report_to_dict(
        eval_report, f"lora-r{cfg.rank}", model.trainable_parameter_count()
    )
    row["rank"] = cfg.rank
    rpt.write_json(row, rank_dir / "report.json")
    return row


if __name__ == "__main__":
    main()
