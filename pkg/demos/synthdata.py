"""Synthetic data helpers shared by the demo scripts."""

from __future__ import annotations

import csv
import random
from pathlib import Path

import numpy as np
from PIL import Image

from mammokit.ingest import FINDING_VOCABULARY


def write_png(path: Path, side: int, rng: random.Random) -> None:
    arr = np.array([[rng.randrange(256) for _ in range(side)] for _ in range(side)], dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def make_cohort(root: Path, n_patients: int, seed: int = 11, image_side: int = 32) -> Path:
    """A metadata CSV plus tiny per-view PNGs; returns the CSV path."""
    rng = random.Random(seed)
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    csv_path = root / "metadata.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "laterality", "view", "image_path", "density", "birads", "findings"])
        for i in range(n_patients):
            patient = f"patient{i:04d}"
            density = {lat: rng.choice("ABCD") for lat in "RL"}
            for lat in "RL":
                for view in ("CC", "MLO"):
                    birads = rng.choices([1, 2, 3, 4, 5], weights=[60, 20, 10, 7, 3])[0]
                    findings = [] if birads == 1 else rng.sample(FINDING_VOCABULARY, k=rng.randint(1, 2))
                    name = f"{patient}_{lat}_{view}.png"
                    write_png(root / "images" / name, image_side, rng)
                    writer.writerow(
                        [patient, lat, view, f"images/{name}", density[lat], birads, ";".join(findings)]
                    )
    return csv_path
