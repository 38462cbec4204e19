"""Command-line entry point: prepare / train / evaluate / recommend.

Configuration precedence is built-in defaults < ``--config`` key=value file
< command-line flags, and every output artifact echoes the effective
configuration. ``--deterministic`` pins torch to one thread so repeated runs
with the same seed produce byte-identical checkpoints and reports.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch

from . import data as data_mod
from . import evaluation as eval_mod
from . import training as train_mod
from .boxes import BoxEmbedding, ScoringConfig
from .propagation import propagate

# flag name -> TrainConfig field
_FLAG_FIELDS = {
    "dim": "dim",
    "layers": "n_layers",
    "beta": "beta",
    "lr": "learning_rate",
    "reg": "reg_lambda",
    "dropout": "dropout_ratio",
    "batch_size": "batch_size",
    "seed": "seed",
    "epochs": "max_epochs",
    "eval_every": "eval_every",
    "patience": "patience",
}


def _read_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise click.ClickException(
                f"{path}:{lineno}: expected KEY=VALUE, got {line!r}"
            )
        key, _, value = stripped.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(name: str, value, target):
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    try:
        return type(target)(value)
    except (TypeError, ValueError):
        raise click.ClickException(f"config field {name!r}: bad value {value!r}")


def build_train_config(
    config_file: Path | None, flags: dict, no_gnn: bool, no_gumbel: bool
) -> train_mod.TrainConfig:
    cfg = train_mod.TrainConfig()
    fields = asdict(cfg)
    if config_file is not None:
        file_values = _read_config_file(config_file)
        for key, raw in file_values.items():
            field = _FLAG_FIELDS.get(key, key)
            if field in fields:
                fields[field] = _coerce(field, raw, fields[field])
            elif field == "no_gnn":
                no_gnn = no_gnn or _coerce(field, raw, True)
            elif field == "no_gumbel":
                no_gumbel = no_gumbel or _coerce(field, raw, True)
            else:
                raise click.ClickException(f"unknown config field {key!r}")
    for flag, field in _FLAG_FIELDS.items():
        if flags.get(flag) is not None:
            fields[field] = flags[flag]
    if no_gnn:
        fields["n_layers"] = 0
    if no_gumbel:
        fields["gumbel"] = False
    try:
        return train_mod.TrainConfig(**fields)
    except ValueError as exc:
        raise click.ClickException(str(exc))


def _effective_config(cfg: train_mod.TrainConfig, **extra) -> dict:
    doc = asdict(cfg)
    doc.update(extra)
    return doc


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise click.ClickException(f"{what} not found: {path}")
    return path


def _load_dataset(manifest: Path) -> data_mod.Dataset:
    _require_file(manifest, "manifest")
    try:
        return data_mod.load_manifest(manifest)
    except (ValueError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"failed to read manifest {manifest}: {exc}")


def _load_checkpoint_checked(checkpoint: Path, dataset: data_mod.Dataset):
    _require_file(checkpoint, "checkpoint")
    params, header = train_mod.load_checkpoint(checkpoint)
    expected = dataset.vocab_hash()
    if header.get("vocab_hash") != expected:
        raise click.ClickException(
            f"vocabulary hash mismatch: checkpoint carries "
            f"{header.get('vocab_hash')!r} but the manifest hashes to {expected!r}; "
            f"this checkpoint was trained against a different manifest"
        )
    return params, header


def _apply_determinism(deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)


@click.group()
def main() -> None:
    """Tag-aware box-embedding recommender."""


@main.command()
@click.option("--dataset", "dataset_path", type=Path, required=True, help="HetRec-style input file.")
@click.option("--out", "out_dir", type=Path, required=True, help="Output directory.")
@click.option("--min-tag-count", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--deterministic", is_flag=True, default=False)
def prepare(dataset_path: Path, out_dir: Path, min_tag_count: int, seed: int, deterministic: bool) -> None:
    """Parse, filter infrequent tags, split, and write the dataset manifest."""
    _apply_determinism(deterministic)
    _require_file(dataset_path, "dataset file")
    try:
        dataset = data_mod.prepare_dataset(
            dataset_path, min_tag_count=min_tag_count, seed=seed
        )
    except (data_mod.HetrecFormatError, ValueError, OSError) as exc:
        raise click.ClickException(str(exc))
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.json"
    data_mod.save_manifest(dataset, manifest)
    click.echo(f"manifest: {manifest}")
    click.echo(f"users: {dataset.n_users}")
    click.echo(f"items: {dataset.n_items}")
    click.echo(f"tags: {dataset.n_tags}")
    total = len(dataset.train) + len(dataset.validation) + len(dataset.test)
    click.echo(f"assignments: {total}")
    click.echo(
        f"split sizes: train={len(dataset.train)} "
        f"validation={len(dataset.validation)} test={len(dataset.test)}"
    )


@main.command()
@click.option("--manifest", type=Path, required=True)
@click.option("--out", "out_dir", type=Path, required=True)
@click.option("--config", "config_file", type=Path, default=None, help="KEY=VALUE config file.")
@click.option("--dim", type=int, default=None)
@click.option("--layers", type=int, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--reg", type=float, default=None)
@click.option("--dropout", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--eval-every", type=int, default=None)
@click.option("--patience", type=int, default=None)
@click.option("--no-gnn", is_flag=True, default=False, help="Ablation: skip message passing (0 layers).")
@click.option("--no-gumbel", is_flag=True, default=False, help="Ablation: hard-overlap scoring.")
@click.option("--deterministic", is_flag=True, default=False)
def train(manifest: Path, out_dir: Path, config_file: Path | None, no_gnn: bool, no_gumbel: bool, deterministic: bool, **flags) -> None:
    """Train on a prepared manifest with early stopping on validation Recall@20."""
    _apply_determinism(deterministic)
    if config_file is not None:
        _require_file(config_file, "config file")
    cfg = build_train_config(config_file, flags, no_gnn, no_gumbel)
    dataset = _load_dataset(manifest)
    effective = _effective_config(
        cfg,
        command="train",
        manifest=str(manifest),
        no_gnn=no_gnn,
        no_gumbel=no_gumbel,
        deterministic=deterministic,
    )
    if no_gnn:
        click.echo("ablation: no-gnn (0 propagation layers)")
    if no_gumbel:
        click.echo("ablation: no-gumbel (hard-overlap scoring)")

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(effective, fh, sort_keys=True, indent=2)
        fh.write("\n")

    ctg = dataset.training_graph()
    gen = torch.Generator().manual_seed(cfg.seed)
    params = train_mod.init_params(dataset.counts, cfg, gen)
    vocab_hash = dataset.vocab_hash()
    ckpt_path = out_dir / "checkpoint.bin"

    def save_best(model, epoch, metric):
        train_mod.save_checkpoint(
            ckpt_path, model, config=effective, seed=cfg.seed, vocab_hash=vocab_hash
        )
        click.echo(f"epoch {epoch}: new best validation recall@20 = {metric:.6f}")

    def log_epoch(epoch, mean_loss):
        click.echo(f"epoch {epoch}: loss {mean_loss:.6f}")

    result = train_mod.fit(
        params, ctg, dataset, cfg, on_new_best=save_best, on_epoch=log_epoch
    )

    with open(out_dir / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in result.epoch_losses:
            writer.writerow([epoch, repr(loss)])
    with open(out_dir / "validation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "recall@10", "recall@20", "ndcg@10", "ndcg@20", "is_best"])
        for rec in result.evaluations:
            writer.writerow(
                [
                    rec["epoch"],
                    repr(rec["recall"][10]),
                    repr(rec["recall"][20]),
                    repr(rec["ndcg"][10]),
                    repr(rec["ndcg"][20]),
                    int(rec["is_best"]),
                ]
            )
    if not ckpt_path.exists():
        # no validation pass ran (e.g. --epochs 0): persist the final state
        train_mod.save_checkpoint(
            ckpt_path, params, config=effective, seed=cfg.seed, vocab_hash=vocab_hash
        )
    if result.best_epoch is not None:
        click.echo(
            f"best epoch {result.best_epoch}: validation recall@20 = "
            f"{result.best_metric:.6f}"
        )
    click.echo(f"checkpoint: {ckpt_path}")


@main.command()
@click.option("--manifest", type=Path, required=True)
@click.option("--checkpoint", type=Path, required=True)
@click.option("--split", type=click.Choice(["validation", "test"]), default="test", show_default=True)
@click.option("--out", "report_path", type=Path, default=None, help="Report path (default: next to the checkpoint).")
@click.option("--per-user", is_flag=True, default=False, help="Include per-user metrics in the report.")
@click.option("--deterministic", is_flag=True, default=False)
def evaluate(manifest: Path, checkpoint: Path, split: str, report_path: Path | None, per_user: bool, deterministic: bool) -> None:
    """All-ranking Recall@{10,20} and NDCG@{10,20} on a held-out split."""
    _apply_determinism(deterministic)
    dataset = _load_dataset(manifest)
    params, header = _load_checkpoint_checked(checkpoint, dataset)
    cfg_doc = header.get("config") or {}
    gumbel = bool(cfg_doc.get("gumbel", True))
    scoring = ScoringConfig(beta=float(cfg_doc.get("beta", 0.2)))
    result = eval_mod.evaluate(
        params,
        dataset.training_graph(),
        dataset,
        split=split,
        cfg=scoring,
        gumbel=gumbel,
        collect_per_user=per_user,
    )
    for k in sorted(result.recall):
        click.echo(f"recall@{k}: {result.recall[k]:.6f}")
    for k in sorted(result.ndcg):
        click.echo(f"ndcg@{k}: {result.ndcg[k]:.6f}")
    click.echo(f"users evaluated: {result.n_users}")
    if report_path is None:
        report_path = checkpoint.parent / f"metrics_{split}.json"
    eval_mod.write_metrics_report(
        report_path, result, split, config={**cfg_doc, "split": split}
    )
    click.echo(f"report: {report_path}")


@main.command()
@click.option("--manifest", type=Path, required=True)
@click.option("--checkpoint", type=Path, required=True)
@click.option("--user", "user_raw", type=str, required=True, help="External user id.")
@click.option("--top-k", type=int, default=10, show_default=True)
@click.option("--deterministic", is_flag=True, default=False)
def recommend(manifest: Path, checkpoint: Path, user_raw: str, top_k: int, deterministic: bool) -> None:
    """Top-K unseen items for one user, with scores."""
    _apply_determinism(deterministic)
    dataset = _load_dataset(manifest)
    params, header = _load_checkpoint_checked(checkpoint, dataset)
    if user_raw not in dataset.user_index:
        raise click.ClickException(f"user {user_raw!r} not found in the vocabulary")
    user = dataset.user_index[user_raw]
    cfg_doc = header.get("config") or {}
    gumbel = bool(cfg_doc.get("gumbel", True))
    scoring = ScoringConfig(beta=float(cfg_doc.get("beta", 0.2)))
    with torch.no_grad():
        state = propagate(params, dataset.training_graph())
    train_pos = dataset.train_positive_sets()[user]
    order = eval_mod.rank_all(user, state, train_pos, scoring, gumbel=gumbel)
    u_box = BoxEmbedding(
        state.users.center[user : user + 1], state.users.offset[user : user + 1]
    )
    with torch.no_grad():
        scores = eval_mod._pairwise_scores(u_box, state.items, scoring, gumbel)
    shown = 0
    for item in order:
        if shown >= top_k:
            break
        if int(item) in train_pos:
            continue
        click.echo(f"{dataset.items[int(item)]}\t{float(scores[int(item)]):.6f}")
        shown += 1


if __name__ == "__main__":
    main()
