import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from conftest import make_cohort, make_dmid_dir
from mammokit.cli import main
from mammokit.config import ENDPOINT_ENV_VAR, ConfigError, ExperimentConfig, load_config, write_config

GOLDENS = Path(__file__).parent / "goldens"


@pytest.fixture()
def cli():
    return CliRunner()


def test_ingest_vindr(cli, tmp_path):
    csv_path = make_cohort(tmp_path / "cohort", n_patients=6, seed=2, with_images=False)
    out = tmp_path / "gt.jsonl"
    result = cli.invoke(main, ["ingest", "--metadata", str(csv_path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert len(out.read_text().splitlines()) == 6


def test_ingest_dmid(cli, tmp_path):
    dmid = make_dmid_dir(tmp_path / "dmid", n_images=8, seed=2)
    out = tmp_path / "gt.jsonl"
    result = cli.invoke(main, ["ingest", "--dmid-dir", str(dmid), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert len(out.read_text().splitlines()) == 8


def test_ingest_requires_one_source(cli, tmp_path):
    result = cli.invoke(main, ["ingest", "--out", str(tmp_path / "x.jsonl")])
    assert result.exit_code != 0


def test_compose(cli, tmp_path):
    csv_path = make_cohort(tmp_path / "cohort", n_patients=3, seed=4)
    out_dir = tmp_path / "composites"
    result = cli.invoke(
        main,
        ["compose", "--metadata", str(csv_path), "--image-root", str(csv_path.parent),
         "--out-dir", str(out_dir), "--target-side", "16"],
    )
    assert result.exit_code == 0, result.output
    pngs = list(out_dir.glob("*.png"))
    assert len(pngs) == 3
    from PIL import Image

    with Image.open(pngs[0]) as img:
        assert img.size == (32, 32)


def test_rebalance(cli, tmp_path):
    csv_path = make_cohort(tmp_path / "cohort", n_patients=30, seed=6)
    out_dir = tmp_path / "rebalanced"
    result = cli.invoke(
        main,
        ["rebalance", "--metadata", str(csv_path), "--image-root", str(csv_path.parent),
         "--targets", "1=4,2=4", "--seed", "3", "--target-side", "16", "--out-dir", str(out_dir)],
    )
    assert result.exit_code == 0, result.output
    manifest = out_dir / "rebalance_manifest.jsonl"
    lines = [json.loads(l) for l in manifest.read_text().splitlines()]
    assert len(lines) == 8
    assert all((out_dir / line["output"]).exists() for line in lines)


def test_parse_debug_command(cli, tmp_path):
    raw = tmp_path / "raw.txt"
    raw.write_text('prose {"breast_density": "ACR B", "findings": "Healthy Breast. No Findings", '
                   '"BI-RADS": "2", "suspicion": "benign"} trailing')
    result = cli.invoke(main, ["parse", str(raw)])
    assert result.exit_code == 0
    parsed = json.loads(result.output)
    assert parsed["status"] == "parsed"
    assert parsed["birads_class"] == 2


def test_validate_command(cli, tmp_path):
    ok = cli.invoke(main, ["validate", str(GOLDENS / "run_records_50.jsonl")])
    assert ok.exit_code == 0 and "ok" in ok.output
    bad_file = tmp_path / "bad.jsonl"
    bad_file.write_text("not json\n")
    bad = cli.invoke(main, ["validate", str(bad_file)])
    assert bad.exit_code == 1


def test_full_cli_workflow(cli, tmp_path, mock_server):
    csv_path = make_cohort(tmp_path / "cohort", n_patients=25, seed=9)
    runs = tmp_path / "runs"
    common = [
        "--dataset-kind", "vindr", "--metadata-path", str(csv_path),
        "--image-root", str(csv_path.parent), "--model-name", "mock-vlm",
        "--endpoint", mock_server.url, "--output-dir", str(runs),
        "--no-timing", "--target-side", "16",
    ]
    index_path = tmp_path / "idx.mwix"
    built = cli.invoke(main, ["index", "build", *common, "--rag-index-path", str(index_path),
                              "--embed-endpoint", mock_server.url, "--run-id", "ignored"])
    assert built.exit_code == 0, built.output
    assert index_path.exists()

    base = cli.invoke(main, ["run", *common, "--prompt-mode", "zero_shot", "--run-id", "base"])
    assert base.exit_code == 0, base.output
    rag = cli.invoke(main, ["run", *common, "--prompt-mode", "rag_few_shot", "--run-id", "rag",
                            "--rag-enabled", "--rag-index-path", str(index_path),
                            "--embed-endpoint", mock_server.url])
    assert rag.exit_code == 0, rag.output

    evaled = cli.invoke(main, ["evaluate", str(runs / "base.jsonl")])
    assert evaled.exit_code == 0, evaled.output
    assert (runs / "base_metrics.csv").exists()

    compared = cli.invoke(main, ["compare", str(runs / "base.jsonl"), str(runs / "rag.jsonl"),
                                 "--out", str(tmp_path / "best.csv")])
    assert compared.exit_code == 0, compared.output
    assert "Best Value" in (tmp_path / "best.csv").read_text()


def test_run_preflight_failure_is_clean_error(cli, tmp_path):
    csv_path = make_cohort(tmp_path / "cohort", n_patients=4, seed=1)
    result = cli.invoke(main, ["run", "--dataset-kind", "vindr", "--metadata-path", str(csv_path),
                               "--endpoint", "http://127.0.0.1:9", "--run-id", "x",
                               "--output-dir", str(tmp_path / "runs")])
    assert result.exit_code == 1
    assert "preflight" in result.output


# ---------------------------------------------------------------- config file

def test_config_file_round_trip(tmp_path):
    config = ExperimentConfig(model_name="some-model", split_seed=5, rag_k=3)
    path = tmp_path / "exp.conf"
    write_config(config, path)
    loaded = load_config(path)
    assert loaded == config


def test_config_file_with_override(tmp_path):
    path = tmp_path / "exp.conf"
    write_config(ExperimentConfig(model_name="a"), path)
    loaded = load_config(path, overrides={"model_name": "b", "split_seed": None})
    assert loaded.model_name == "b"
    assert loaded.split_seed == 17


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "exp.conf"
    path.write_text("[model]\nmodle_name = typo\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_rag_k_bounded():
    with pytest.raises(ConfigError):
        ExperimentConfig(rag_k=6)
    with pytest.raises(ConfigError):
        ExperimentConfig(rag_k=0)


def test_endpoint_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(ENDPOINT_ENV_VAR, "http://elsewhere:1234")
    config = ExperimentConfig().apply_env()
    assert config.endpoint == "http://elsewhere:1234"


def test_cli_run_uses_config_file(cli, tmp_path, mock_server):
    csv_path = make_cohort(tmp_path / "cohort", n_patients=25, seed=9)
    config = ExperimentConfig(
        dataset_kind="vindr", metadata_path=str(csv_path), image_root=str(csv_path.parent),
        model_name="mock-vlm", endpoint=mock_server.url, run_id="fromfile",
        output_dir=str(tmp_path / "runs"), timing=False, target_side=16,
    )
    conf = tmp_path / "exp.conf"
    write_config(config, conf)
    result = cli.invoke(main, ["run", "--config", str(conf)])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "runs" / "fromfile.jsonl").exists()
