"""Instruction-tuning dataset preparation from the rebalance manifest.

Each manifest row (one PNG plus its report) becomes one training record:
the zero-shot prompt, the image path, and a completion that is either the
full report JSON (multi-task) or one field's bare value (single-task).
Multi-task completions must round-trip through the report parser, so a
model that learns them emits scoreable output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from mammokit.parsing import ParseStatus, parse

from .config import FinetuneConfig

SCHEMA_KEYS = ("image_id", "breast_density", "BI-RADS", "findings", "suspicion")

SINGLE_TASK_SUFFIX = (
    "\n\nFor this request, respond with only the value of the \"{field}\" field, nothing else."
)

MANIFEST_ROW_KEYS = ("output", "class", "report")


class ManifestMismatch(Exception):
    def __init__(self, line_no: int, detail: str):
        super().__init__(f"manifest line {line_no}: {detail}")
        self.line_no = line_no


@dataclass(frozen=True)
class TrainSample:
    case_id: str
    image_path: str
    prompt: str
    completion: str
    class_label: int
    provenance: dict

    def as_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "image": self.image_path,
            "prompt": self.prompt,
            "completion": self.completion,
            "class": self.class_label,
            "provenance": self.provenance,
        }


def zero_shot_prompt() -> str:
    """The generation prompt shared with the primary pipeline (its packaged
    zero-shot template asset, four-view wording)."""
    return resources.files("mammokit.templates").joinpath("zero_shot.txt").read_text(encoding="utf-8")


def template_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    rows = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except ValueError as exc:
            raise ManifestMismatch(line_no, f"unreadable JSON: {exc}") from exc
        missing = [k for k in MANIFEST_ROW_KEYS if k not in row]
        if missing:
            raise ManifestMismatch(line_no, f"missing keys {missing}")
        if not isinstance(row["report"], dict):
            raise ManifestMismatch(line_no, "report is not an object")
        rows.append(row)
    return rows


def _completion(report: dict, config: FinetuneConfig, line_no: int) -> str:
    if config.output_format == "single_task":
        value = report.get(config.target_field)
        if not isinstance(value, str) or not value:
            raise ManifestMismatch(line_no, f"report lacks text field {config.target_field!r}")
        return value
    try:
        completion = json.dumps({k: report[k] for k in SCHEMA_KEYS})
    except KeyError as exc:
        raise ManifestMismatch(line_no, f"report lacks schema key {exc}") from exc
    if parse(completion).status is not ParseStatus.PARSED:
        raise ManifestMismatch(line_no, "report JSON does not round-trip through the parser")
    return completion


def prepare(manifest_path: str | Path, out_dir: str | Path, config: FinetuneConfig) -> Path:
    """Write train.jsonl plus dataset_info.json under out_dir; returns the
    dataset file path. The per-class histogram of the manifest is
    preserved record for record."""
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_manifest(manifest_path)

    prompt = zero_shot_prompt()
    if config.output_format == "single_task":
        prompt = prompt + SINGLE_TASK_SUFFIX.format(field=config.target_field)

    samples = []
    histogram: dict[int, int] = {}
    for line_no, row in enumerate(rows, start=1):
        image_path = str((manifest_path.parent / row["output"]))
        label = int(row["class"])
        samples.append(
            TrainSample(
                case_id=Path(row["output"]).stem,
                image_path=image_path,
                prompt=prompt,
                completion=_completion(row["report"], config, line_no),
                class_label=label,
                provenance={
                    "original_id": row.get("original_id"),
                    "op": row.get("op"),
                    "spec": row.get("spec"),
                },
            )
        )
        histogram[label] = histogram.get(label, 0) + 1

    dataset_path = out_dir / "train.jsonl"
    with dataset_path.open("w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.as_dict()) + "\n")
    info = {
        "n": len(samples),
        "histogram": {str(k): v for k, v in sorted(histogram.items())},
        "output_format": config.output_format,
        "target_field": config.target_field,
        "template_digest": template_digest(prompt),
        "source_manifest": str(manifest_path),
    }
    (out_dir / "dataset_info.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    return dataset_path


def load_dataset(dataset_path: str | Path) -> tuple[list[dict], dict]:
    dataset_path = Path(dataset_path)
    records = [json.loads(line) for line in dataset_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    info_path = dataset_path.parent / "dataset_info.json"
    info = json.loads(info_path.read_text(encoding="utf-8")) if info_path.exists() else {}
    return records, info
