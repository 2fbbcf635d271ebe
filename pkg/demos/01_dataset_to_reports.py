"""From a per-view metadata CSV to patient studies and reference reports.

Builds a small synthetic cohort, assembles the four-view studies, derives
patient-level labels (max BI-RADS across views, denser breast wins for
density), and synthesizes the reference report each model answer will be
scored against.
"""

import tempfile
from pathlib import Path

from synthdata import make_cohort

from mammokit import ingest

workdir = Path(tempfile.mkdtemp(prefix="mammokit_demo_"))
csv_path = make_cohort(workdir, n_patients=12, seed=3)
print(f"cohort at {csv_path}")

records, bad_rows = ingest.load_vindr_metadata(csv_path, strict=False)
print(f"{len(records)} view records loaded, {len(bad_rows)} bad rows")

studies, problems = ingest.assemble_studies(records)
print(f"{len(studies)} complete studies, {len(problems)} problem patients")

study = studies[0]
birads, density = ingest.derive_patient_labels(study)
print(f"\npatient {study.patient_id}: per-view birads "
      f"{[v.birads for v in study.ordered_views()]} -> patient label {birads}, density {density}")

report = ingest.synthesize_report(study)
print(f"findings_text: {report.findings_text}")
print(f"suspicion:     {report.suspicion}")
print(f"flags:         {report.flags}")

out = workdir / "ground_truth.jsonl"
ingest.write_ground_truth_jsonl([(s.patient_id, ingest.synthesize_report(s)) for s in studies], out)
print(f"\nwrote {out} ({len(studies)} lines); first line:")
print(out.read_text().splitlines()[0])
