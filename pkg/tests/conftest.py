"""Shared fixtures: synthetic cohorts, DMID-style pairs, and the mock server."""

from __future__ import annotations

import csv
import random
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from mammokit.ingest import FINDING_VOCABULARY
from mammokit.mock_server import MockVLMServer

LATERALITIES = ("R", "L")
VIEWS = ("CC", "MLO")


def write_png(path: Path, side: int, rng: random.Random) -> None:
    arr = np.array(
        [[rng.randrange(256) for _ in range(side)] for _ in range(side)], dtype=np.uint8
    )
    Image.fromarray(arr, mode="L").save(path)


def make_cohort(
    root: Path,
    n_patients: int,
    seed: int = 11,
    image_side: int = 16,
    with_images: bool = True,
) -> Path:
    """Write a synthetic per-view metadata CSV (plus tiny PNGs) under root.

    Labels are seeded-random but internally consistent: BI-RADS 1 views
    carry no findings, higher categories may carry several.
    """
    rng = random.Random(seed)
    root.mkdir(parents=True, exist_ok=True)
    image_dir = root / "images"
    if with_images:
        image_dir.mkdir(exist_ok=True)
    csv_path = root / "metadata.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "laterality", "view", "image_path", "density", "birads", "findings"])
        for i in range(n_patients):
            patient = f"patient{i:05d}"
            density = {lat: rng.choice("ABCD") for lat in LATERALITIES}
            for lat in LATERALITIES:
                for view in VIEWS:
                    birads = rng.choices([1, 2, 3, 4, 5], weights=[60, 20, 10, 7, 3])[0]
                    if birads == 1:
                        findings = []
                    else:
                        findings = rng.sample(FINDING_VOCABULARY, k=rng.randint(1, 2))
                    name = f"{patient}_{lat}_{view}.png"
                    if with_images:
                        write_png(image_dir / name, image_side, rng)
                    writer.writerow(
                        [patient, lat, view, f"images/{name}", density[lat], birads, ";".join(findings)]
                    )
    return csv_path


def make_dmid_dir(root: Path, n_images: int, seed: int = 5, image_side: int = 16) -> Path:
    """Write DMID-style <id>.png / <id>.txt pairs under root."""
    rng = random.Random(seed)
    root.mkdir(parents=True, exist_ok=True)
    findings_pool = (
        "A well-circumscribed mass is seen in the upper outer quadrant",
        "Scattered benign calcification noted",
        "Focal asymmetry in the retroareolar region",
        "Architectural distortion without discrete mass",
    )
    for i in range(n_images):
        stem = f"dmid{i:04d}"
        write_png(root / f"{stem}.png", image_side, rng)
        density = rng.choice("ABCD")
        birads = rng.choices([1, 2, 3, 4, 5], weights=[40, 25, 15, 12, 8])[0]
        lines = [f"Breast composition: ACR {density}.", f"Impression: BIRADS-{birads}."]
        if birads > 1:
            lines.insert(1, rng.choice(findings_pool) + ".")
        (root / f"{stem}.txt").write_text("\n".join(lines), encoding="utf-8")
    return root


@pytest.fixture()
def mock_server():
    with MockVLMServer() as server:
        yield server


@pytest.fixture()
def cohort_csv(tmp_path):
    return make_cohort(tmp_path / "cohort", n_patients=20, seed=11)
