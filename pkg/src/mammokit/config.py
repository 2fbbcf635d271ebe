"""Experiment configuration: one flat dataclass, loadable from an INI-style
key=value file, overridable by CLI flags and the MW_ENDPOINT variable."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, asdict, fields
from pathlib import Path

ENDPOINT_ENV_VAR = "MW_ENDPOINT"


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    # dataset
    dataset_kind: str = "vindr"          # "vindr" | "dmid"
    metadata_path: str = ""              # vindr per-view CSV
    dmid_dir: str = ""                   # dmid png/txt directory
    image_root: str = ""                 # prefix for relative image paths
    # model
    model_name: str = "mock-vlm"
    endpoint: str = "http://127.0.0.1:11434"
    timeout_s: float = 120.0
    # prompt
    prompt_mode: str = "zero_shot"
    attach_exemplar_images: bool = False
    exemplars_path: str = ""             # override for the fixed few-shot fixture
    template_dir: str = ""               # override packaged template assets
    # rag
    rag_enabled: bool = False
    rag_k: int = 5
    rag_index_path: str = ""
    rag_fuse_text: bool = False
    embed_endpoint: str = ""
    embed_provider_id: str = ""
    embed_dimension: int = 64
    # split
    split_ratio: float = 0.8
    split_seed: int = 17
    # run
    run_id: str = "run"
    output_dir: str = "runs"
    max_cases: int = 0                   # 0 = no limit
    concurrency: int = 1
    timing: bool = True                  # False zeroes latency/timestamp for reproducible files
    target_side: int = 512

    def __post_init__(self):
        if self.dataset_kind not in ("vindr", "dmid"):
            raise ConfigError(f"dataset_kind must be vindr or dmid, got {self.dataset_kind!r}")
        if self.rag_enabled and (not self.rag_index_path or not self.embed_endpoint):
            raise ConfigError("rag_enabled requires rag_index_path and embed_endpoint")
        if not 1 <= self.rag_k <= 5:
            raise ConfigError("rag_k must be between 1 and 5 (prompts take at most five examples)")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")

    def apply_env(self) -> "ExperimentConfig":
        endpoint = os.environ.get(ENDPOINT_ENV_VAR)
        if endpoint:
            self.endpoint = endpoint
        return self

    def as_dict(self) -> dict:
        return asdict(self)


_SECTION_OF = {
    "dataset_kind": "dataset", "metadata_path": "dataset", "dmid_dir": "dataset", "image_root": "dataset",
    "model_name": "model", "endpoint": "model", "timeout_s": "model",
    "prompt_mode": "prompt", "attach_exemplar_images": "prompt", "exemplars_path": "prompt",
    "template_dir": "prompt",
    "rag_enabled": "rag", "rag_k": "rag", "rag_index_path": "rag", "rag_fuse_text": "rag",
    "embed_endpoint": "rag", "embed_provider_id": "rag", "embed_dimension": "rag",
    "split_ratio": "split", "split_seed": "split",
    "run_id": "run", "output_dir": "run", "max_cases": "run", "concurrency": "run",
    "timing": "run", "target_side": "run",
}


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Read the key=value config file, then apply non-None overrides."""
    parser = configparser.ConfigParser()
    read = parser.read(Path(path))
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    known = {f.name: f for f in fields(ExperimentConfig)}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            values[key] = _coerce(raw, known[key].type)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return ExperimentConfig(**values)


def config_from_overrides(overrides: dict) -> ExperimentConfig:
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def write_config(config: ExperimentConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for key, value in config.as_dict().items():
        section = _SECTION_OF[key]
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    with Path(path).open("w", encoding="utf-8") as fh:
        parser.write(fh)


def _coerce(raw: str, annotation) -> object:
    raw = raw.strip()
    ann = str(annotation)
    if "bool" in ann:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if "int" in ann:
        return int(raw)
    if "float" in ann:
        return float(raw)
    return raw
