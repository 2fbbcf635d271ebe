"""Command-line entry points; see README for the config file format."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import imaging, ingest, parsing, runner
from .config import ExperimentConfig, config_from_overrides, load_config
from .imaging import ImagingConfig, RasterImage

# Default per-class targets for the rebalance subcommand: majority classes
# down to 500, BI-RADS 5 capped by the 300% augmentation limit.
DEFAULT_REBALANCE_TARGETS = "1=500,2=500,3=500,4=500,5=200"


@click.group()
def main():
    """Local harness for structured mammogram reporting with VLMs."""


def _echo_problems(problems, label: str) -> None:
    if problems:
        click.echo(f"{label}: {len(problems)}", err=True)
        for p in problems[:20]:
            click.echo(f"  {p}", err=True)
        if len(problems) > 20:
            click.echo(f"  ... and {len(problems) - 20} more", err=True)


@main.command()
@click.option("--metadata", type=click.Path(exists=True, dir_okay=False), help="Per-view metadata CSV.")
@click.option("--dmid-dir", type=click.Path(exists=True, file_okay=False), help="Directory of png/txt pairs.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Ground-truth JSONL to write.")
def ingest_cmd(metadata, dmid_dir, out):
    """Load a dataset and write the ground-truth report JSONL."""
    if bool(metadata) == bool(dmid_dir):
        raise click.UsageError("provide exactly one of --metadata / --dmid-dir")
    if metadata:
        records, bad = ingest.load_vindr_metadata(metadata, strict=False)
        _echo_problems(bad, "rows with bad labels")
        studies, problems = ingest.assemble_studies(records)
        _echo_problems(problems, "incomplete/duplicate patients")
        items = [(s.patient_id, ingest.synthesize_report(s)) for s in studies]
    else:
        pairs, problems = ingest.load_dmid(dmid_dir, strict=False)
        _echo_problems(problems, "unpaired or unextractable files")
        items = [(Path(image).stem, report) for image, report in pairs]
    ingest.write_ground_truth_jsonl(items, out)
    click.echo(f"wrote {len(items)} ground-truth reports to {out}")


main.add_command(ingest_cmd, name="ingest")


@main.command()
@click.option("--metadata", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image-root", default="", help="Prefix for relative image paths.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--target-side", default=512, show_default=True)
def compose(metadata, image_root, out_dir, target_side):
    """Build four-view composite PNGs for every complete study."""
    records, _ = ingest.load_vindr_metadata(metadata, strict=False)
    studies, problems = ingest.assemble_studies(records)
    _echo_problems(problems, "incomplete/duplicate patients")
    cfg = ImagingConfig(target_side=target_side)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for study in studies:
        tiles = [
            imaging.resize_square(RasterImage.load(runner._resolve(v.image_ref, image_root)), cfg)
            for v in study.ordered_views()
        ]
        imaging.compose_four_view(*tiles, cfg).save(out / f"{study.patient_id}.png")
    click.echo(f"wrote {len(studies)} composites to {out_dir}")


def _config_options(fn):
    """Flags mirroring ExperimentConfig; None means 'not overridden'."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
        click.option("--dataset-kind", type=click.Choice(["vindr", "dmid"]), default=None),
        click.option("--metadata-path", default=None),
        click.option("--dmid-dir", default=None),
        click.option("--image-root", default=None),
        click.option("--model-name", default=None),
        click.option("--endpoint", default=None),
        click.option("--timeout-s", type=float, default=None),
        click.option("--prompt-mode", type=click.Choice(["zero_shot", "few_shot", "cot", "rag_few_shot"]), default=None),
        click.option("--attach-exemplar-images/--no-attach-exemplar-images", default=None),
        click.option("--exemplars-path", default=None),
        click.option("--template-dir", default=None),
        click.option("--rag-enabled/--no-rag-enabled", default=None),
        click.option("--rag-k", type=int, default=None),
        click.option("--rag-index-path", default=None),
        click.option("--rag-fuse-text/--no-rag-fuse-text", default=None),
        click.option("--embed-endpoint", default=None),
        click.option("--embed-provider-id", default=None),
        click.option("--embed-dimension", type=int, default=None),
        click.option("--split-ratio", type=float, default=None),
        click.option("--split-seed", type=int, default=None),
        click.option("--run-id", default=None),
        click.option("--output-dir", default=None),
        click.option("--max-cases", type=int, default=None),
        click.option("--concurrency", type=int, default=None),
        click.option("--timing/--no-timing", default=None),
        click.option("--target-side", type=int, default=None),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _build_config(config_path, overrides) -> ExperimentConfig:
    if config_path:
        config = load_config(config_path, overrides)
    else:
        config = config_from_overrides(overrides)
    return config.apply_env()


@main.command()
@_config_options
def run(config_path, **overrides):
    """Run the experiment loop against the model server."""
    config = _build_config(config_path, overrides)
    try:
        path = runner.run(config)
    except runner.RunnerError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"results written to {path}")


@main.group()
def index():
    """Retrieval index maintenance."""


@index.command("build")
@_config_options
def index_build(config_path, **overrides):
    """Embed train-split cases and persist the retrieval index."""
    config = _build_config(config_path, overrides)
    if not config.rag_index_path:
        raise click.UsageError("--rag-index-path (or config rag_index_path) is required")
    if not config.embed_endpoint:
        raise click.UsageError("--embed-endpoint (or config embed_endpoint) is required")
    try:
        path = runner.build_index(config)
    except runner.RunnerError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"index written to {path}")


@main.command()
@click.argument("results", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
def evaluate(results, out_dir):
    """Score a results file and write CSV/Markdown metric tables."""
    try:
        report = runner.evaluate(results, out_dir=out_dir)
    except runner.CorruptResults as exc:
        raise click.ClickException(str(exc)) from exc
    if report.warning:
        click.echo(f"warning: {report.warning}", err=True)
    click.echo(f"scored {report.n_records} records")
    click.echo(f"tables: {report.csv_path}, {report.md_path}")


@main.command()
@click.argument("results", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the comparison CSV here.")
def compare(results, out):
    """Best value per (task, metric) across runs on the same split."""
    from .metrics import render_csv, render_markdown

    try:
        rows = runner.compare(list(results))
    except (runner.RunnerError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    md = render_markdown(rows, runner.COMPARE_HEADER)
    click.echo(md, nl=False)
    if out:
        Path(out).write_text(render_csv(rows, runner.COMPARE_HEADER), encoding="utf-8")
        click.echo(f"comparison written to {out}")


@main.command()
@click.option("--metadata", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image-root", default="")
@click.option("--targets", default=DEFAULT_REBALANCE_TARGETS, show_default=True,
              help="Per-class targets, e.g. '1=500,2=500'.")
@click.option("--seed", type=int, default=17, show_default=True)
@click.option("--target-side", type=int, default=512, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def rebalance(metadata, image_root, targets, seed, target_side, out_dir):
    """Rebalance composites per class and write PNGs plus a manifest."""
    records, _ = ingest.load_vindr_metadata(metadata, strict=False)
    studies, problems = ingest.assemble_studies(records)
    _echo_problems(problems, "incomplete/duplicate patients")
    cfg = ImagingConfig(target_side=target_side)
    grouped: dict[int, list] = {}
    ids: dict[int, list[str]] = {}
    for study in studies:
        report = ingest.synthesize_report(study)
        tiles = [
            imaging.resize_square(RasterImage.load(runner._resolve(v.image_ref, image_root)), cfg)
            for v in study.ordered_views()
        ]
        composite = imaging.compose_four_view(*tiles, cfg)
        grouped.setdefault(report.birads_class, []).append((composite, report))
        ids.setdefault(report.birads_class, []).append(study.patient_id)
    target_map = {int(k): int(v) for k, v in (kv.split("=") for kv in targets.split(","))}
    counts = {label: len(items) for label, items in grouped.items()}
    plan = imaging.build_rebalance_plan(counts, target_map, seed)
    results = imaging.apply_rebalance(plan, {c: grouped[c] for c in target_map}, ids)
    manifest = imaging.write_rebalanced(results, out_dir)
    click.echo(f"wrote {len(results)} items; manifest at {manifest}")


@main.command("mock-server")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=11435, show_default=True)
@click.option("--models", default="mock-vlm", show_default=True, help="Comma-separated model names.")
@click.option("--embed-dim", type=int, default=64, show_default=True)
def mock_server(host, port, models, embed_dim):
    """Serve the in-repo mock generation + embedding server (for tests/demos)."""
    from .mock_server import MockVLMServer

    server = MockVLMServer(host=host, port=port, models=tuple(models.split(",")), embed_dim=embed_dim)
    click.echo(f"mock server listening on {server.url} (ctrl-c to stop)")
    try:
        server.start()._thread.join()
    except KeyboardInterrupt:
        server.stop()


@main.command()
@click.argument("rawfile", type=click.Path(exists=True, dir_okay=False))
def parse(rawfile):
    """Debug helper: dump the ParsedReport JSON for a raw model output file."""
    text = Path(rawfile).read_text(encoding="utf-8")
    click.echo(json.dumps(parsing.parse(text).as_dict(), indent=2))


@main.command()
@click.argument("results", type=click.Path(exists=True, dir_okay=False))
def validate(results):
    """Schema-check a results JSONL file; exits non-zero on problems."""
    problems = runner.validate_results(results)
    for p in problems:
        click.echo(p, err=True)
    if problems:
        sys.exit(1)
    click.echo("ok")


if __name__ == "__main__":
    main()
