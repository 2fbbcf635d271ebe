"""Fixtures: synthetic rebalance manifests in the primary's JSONL schema."""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np
from PIL import Image

DENSITY_TEXT = {
    "A": "Density A - Almost entirely fatty. Most of the breast is made of fatty tissue.",
    "B": "Density B - Scattered fibroglandular densities.",
    "C": "Density C - Heterogeneously Dense. More of the breast is made of dense tissue.",
    "D": "Density D - Extremely Dense. Almost all of the breast is dense tissue.",
}
BIRADS_TEXT = {
    1: "BI-RADS 1 - Negative. Healthy Breast.",
    2: "BI-RADS 2 - Benign (non-cancerous) finding",
    3: "BI-RADS 3 - Probably benign. Short-term follow-up recommended.",
    4: "BI-RADS 4 - Suspicious abnormality. Biopsy needed.",
    5: "BI-RADS 5 - Highly suggestive of malignancy. High probability of cancer.",
}
FINDINGS = {
    1: "Healthy Breast. No Findings",
    2: "Benign finding in right CC view",
    3: "Focal Asymmetry in left MLO view",
    4: "Mass in right CC view",
    5: "Mass in left CC view; Suspicious Calcification in left MLO view",
}
SUSPICION = {1: "healthy", 2: "benign", 3: "benign", 4: "suspicious", 5: "suspicious"}


def make_report(label: int, rng: random.Random, image_id: str) -> dict:
    density = rng.choice("ABCD")
    findings = FINDINGS[label]
    lowered = findings.lower()
    return {
        "image_id": image_id,
        "breast_density": DENSITY_TEXT[density],
        "BI-RADS": BIRADS_TEXT[label],
        "findings": findings,
        "suspicion": SUSPICION[label],
        "birads_class": label,
        "density_class": density,
        "flags": {
            "mass": "mass" in lowered,
            "calcification": "calcification" in lowered,
            "asymmetry": "asymmetr" in lowered,
        },
    }


def make_manifest(
    root: Path,
    histogram: dict[int, int],
    seed: int = 7,
    image_side: int = 16,
) -> Path:
    """Write PNGs plus a rebalance-manifest JSONL under root."""
    rng = random.Random(seed)
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "rebalance_manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as fh:
        seq = 0
        for label in sorted(histogram):
            for _ in range(histogram[label]):
                name = f"case_{label}_{seq:05d}.png"
                _write_png(root / name, image_side, rng)
                row = {
                    "original_id": f"orig-{label}-{seq:05d}",
                    "class": label,
                    "op": "original",
                    "spec": None,
                    "output": name,
                    "report": make_report(label, rng, name),
                }
                fh.write(json.dumps(row) + "\n")
                seq += 1
    return manifest


def _write_png(path: Path, side: int, rng: random.Random) -> None:
    arr = np.array([[rng.randrange(256) for _ in range(side)] for _ in range(side)], dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(path)
