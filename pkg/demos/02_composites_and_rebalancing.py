"""Composites and class rebalancing.

Resizes the four views, tiles them CC on top / MLO below (right breast in
the left column), then runs a rebalancing plan: majority classes are
downsampled, minority classes augmented with label-preserving flips,
scales, and translations. A flip swaps the laterality words in the
report's findings sentence.
"""

import tempfile
from pathlib import Path

from synthdata import make_cohort

from mammokit import imaging, ingest
from mammokit.imaging import AugmentationSpec, ImagingConfig, RasterImage

workdir = Path(tempfile.mkdtemp(prefix="mammokit_demo_"))
csv_path = make_cohort(workdir, n_patients=40, seed=5)
records, _ = ingest.load_vindr_metadata(csv_path, strict=False)
studies, _ = ingest.assemble_studies(records)

cfg = ImagingConfig(target_side=32)
grouped, ids = {}, {}
for study in studies:
    report = ingest.synthesize_report(study)
    tiles = [
        imaging.resize_square(RasterImage.load(workdir / v.image_ref), cfg)
        for v in study.ordered_views()
    ]
    composite = imaging.compose_four_view(*tiles, cfg)
    grouped.setdefault(report.birads_class, []).append((composite, report))
    ids.setdefault(report.birads_class, []).append(study.patient_id)

counts = {label: len(items) for label, items in grouped.items()}
print(f"class counts before: {dict(sorted(counts.items()))}")

# flips swap laterality in the paired report
sample_img, sample_report = grouped[max(counts)][0]
flipped_img, flipped_report = imaging.augment(
    sample_img, sample_report, AugmentationSpec(flip_horizontal=True)
)
print(f"\nbefore flip: {sample_report.findings_text}")
print(f"after flip:  {flipped_report.findings_text}")

targets = {label: min(8, 4 * count) for label, count in counts.items()}
plan = imaging.build_rebalance_plan(counts, targets, seed=9)
print("\nplan:")
for cplan in plan.classes:
    print(f"  class {cplan.label}: {cplan.original_count} -> {cplan.target_count} ({cplan.action})")

out = imaging.apply_rebalance(plan, grouped, ids)
histogram = {}
for _, _, prov in out:
    histogram[prov.class_label] = histogram.get(prov.class_label, 0) + 1
print(f"class counts after:  {dict(sorted(histogram.items()))}")

manifest = imaging.write_rebalanced(out, workdir / "rebalanced")
print(f"\nPNGs + manifest at {manifest.parent}")
print("first manifest line:")
print(manifest.read_text().splitlines()[0][:160] + " ...")
