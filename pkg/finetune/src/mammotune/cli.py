"""CLI mirroring FinetuneConfig: prepare / train / predict."""

from __future__ import annotations

import click

from . import data, models, predict as predict_mod, train as train_mod
from .config import FinetuneConfig


@click.group()
def main():
    """Adapter fine-tuning over the rebalanced mammogram dataset."""


def _config_options(fn):
    options = [
        click.option("--base-model", default="tiny-proxy", show_default=True),
        click.option("--lora-rank", type=int, default=16, show_default=True),
        click.option("--lora-alpha", type=float, default=16.0, show_default=True),
        click.option("--lora-dropout", type=float, default=0.05, show_default=True),
        click.option("--learning-rate", type=float, default=2e-4, show_default=True),
        click.option("--batch-size", type=int, default=1, show_default=True),
        click.option("--grad-accum-steps", type=int, default=8, show_default=True),
        click.option("--optimizer", default="adamw_bnb_8bit", show_default=True),
        click.option("--quant-bits", type=int, default=4, show_default=True),
        click.option("--epochs", default="", help="Comma-separated checkpoint epochs (default per format)."),
        click.option("--output-format", type=click.Choice(["multi_task", "single_task"]),
                     default="multi_task", show_default=True),
        click.option("--target-field", default="", help="Schema field for single_task."),
        click.option("--max-steps", type=int, default=0, show_default=True),
        click.option("--seed", type=int, default=17, show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _build_config(**kw) -> FinetuneConfig:
    epochs = tuple(int(e) for e in kw.pop("epochs").split(",") if e.strip()) if kw.get("epochs") else ()
    kw["epochs"] = epochs
    return FinetuneConfig(**kw)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--output-format", type=click.Choice(["multi_task", "single_task"]),
              default="multi_task", show_default=True)
@click.option("--target-field", default="")
def prepare(manifest, out_dir, output_format, target_field):
    """Turn a rebalance manifest into an instruction-tuning dataset."""
    config = FinetuneConfig(output_format=output_format, target_field=target_field)
    try:
        path = data.prepare(manifest, out_dir, config)
    except data.ManifestMismatch as exc:
        raise click.ClickException(str(exc)) from exc
    n = sum(1 for line in path.read_text().splitlines() if line.strip())
    click.echo(f"wrote {n} training records to {path}")


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, dir_okay=False),
              help="train.jsonl produced by prepare.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@_config_options
def train(dataset, out_dir, **kw):
    """Train adapters; writes one checkpoint directory per configured epoch."""
    config = _build_config(**kw)
    try:
        result = train_mod.train(config, dataset, out_dir)
    except (train_mod.TrainingError, models.BaseModelMissing) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    for ckpt in result.checkpoints:
        click.echo(f"checkpoint: {ckpt}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--run-id", default="finetune", show_default=True)
@click.option("--max-new-tokens", type=int, default=96, show_default=True)
def predict(checkpoint, manifest, out, run_id, max_new_tokens):
    """Decode every manifest case into the shared results JSONL schema."""
    try:
        path = predict_mod.predict(checkpoint, manifest, out, run_id=run_id,
                                   max_new_tokens=max_new_tokens)
    except (predict_mod.CheckpointCorrupt, data.ManifestMismatch) as exc:
        raise click.ClickException(str(exc)) from exc
    n = len(path.read_text().splitlines()) - 1
    click.echo(f"wrote {n} prediction records to {path}")


if __name__ == "__main__":
    main()
