import json

import pytest

from conftest import make_manifest
from mammotune import train as train_mod
from mammotune.config import FinetuneConfig
from mammotune.data import prepare
from mammotune.models import BaseModelMissing
from mammotune.train import ResourceExhausted, TrainingError, Vocab, train


def _dataset(tmp_path, histogram=None, **config_kw):
    histogram = histogram or {1: 4, 4: 4}
    manifest = make_manifest(tmp_path / "reb", histogram, image_side=16)
    config = FinetuneConfig(**config_kw)
    return prepare(manifest, tmp_path / "ds", config), config


def test_smoke_two_steps_reduce_loss(tmp_path):
    dataset, _ = _dataset(tmp_path, histogram={1: 10, 4: 10})
    config = FinetuneConfig(epochs=(1,), max_steps=2, seed=5)
    result = train(config, dataset, tmp_path / "adapters")
    assert result.final_loss < result.initial_loss
    assert len(result.checkpoints) == 1
    log_kinds = [json.loads(l)["kind"] for l in result.log_path.read_text().splitlines()]
    assert log_kinds.count("step") == 2
    assert "early_stop" in log_kinds


def test_checkpoints_per_configured_epoch(tmp_path):
    dataset, _ = _dataset(tmp_path, histogram={2: 3},
                          output_format="single_task", target_field="BI-RADS")
    config = FinetuneConfig(output_format="single_task", target_field="BI-RADS",
                            epochs=(6, 10), grad_accum_steps=3, seed=2)
    result = train(config, dataset, tmp_path / "adapters")
    assert [c.name for c in result.checkpoints] == ["epoch_6", "epoch_10"]
    meta = json.loads((result.checkpoints[0] / "checkpoint.json").read_text())
    assert meta["epoch"] == 6
    assert meta["config"]["output_format"] == "single_task"


def test_base_model_missing(tmp_path):
    dataset, _ = _dataset(tmp_path)
    config = FinetuneConfig(base_model="enormous-model-404", epochs=(1,), max_steps=1)
    with pytest.raises(BaseModelMissing):
        train(config, dataset, tmp_path / "adapters")


def test_identical_seeds_identical_data_ordering(tmp_path):
    dataset, _ = _dataset(tmp_path, histogram={1: 6, 3: 6})
    orders = []
    for attempt in range(2):
        config = FinetuneConfig(epochs=(2,), seed=11)
        result = train(config, dataset, tmp_path / f"adapters{attempt}")
        orders.append([
            json.loads(l) for l in result.log_path.read_text().splitlines()
            if json.loads(l)["kind"] == "epoch_order"
        ])
    assert orders[0] == orders[1]
    assert orders[0][0]["case_ids"] != sorted(orders[0][0]["case_ids"])  # actually shuffled


def test_missing_training_image_is_clear_error(tmp_path):
    dataset, config = _dataset(tmp_path)
    lines = dataset.read_text().splitlines()
    record = json.loads(lines[0])
    record["image"] = str(tmp_path / "nope.png")
    dataset.write_text("\n".join([json.dumps(record)] + lines[1:]) + "\n")
    with pytest.raises(TrainingError):
        train(FinetuneConfig(epochs=(1,), max_steps=1), dataset, tmp_path / "adapters")


def test_oom_maps_to_resource_exhausted(tmp_path, monkeypatch):
    dataset, _ = _dataset(tmp_path)

    def explode(*args, **kwargs):
        raise RuntimeError("CUDA out of memory. Tried to allocate 1 TiB")

    monkeypatch.setattr(train_mod, "_sample_loss", explode)
    with pytest.raises(ResourceExhausted):
        train(FinetuneConfig(epochs=(1,), max_steps=1), dataset, tmp_path / "adapters")


def test_vocab_round_trip():
    vocab = Vocab.build(['{"a": 1}', "mass in left view"])
    ids = vocab.encode("mass in left view")
    assert vocab.decode(ids) == "mass in left view"
    assert vocab.encode("unseen-token") == [vocab.index[Vocab.UNK]]
