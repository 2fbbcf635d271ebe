import csv
import itertools
import json
import random
from pathlib import Path

import pytest

from conftest import make_cohort, make_dmid_dir
from mammokit import ingest, parsing
from mammokit.ingest import (
    BadLabelValue,
    DuplicateId,
    DuplicateView,
    EmptyFile,
    ExtractionFailure,
    IncompleteStudy,
    MissingColumn,
    MissingPair,
    PatientStudy,
    ViewRecord,
)


def _write_csv(path: Path, rows: list[list[str]], header=None) -> Path:
    header = header or list(ingest.METADATA_COLUMNS)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _view(patient="p1", lat="R", view="CC", density="C", birads=1, findings=()):
    return ViewRecord(patient, lat, view, f"{patient}_{lat}_{view}.png", density, birads, tuple(findings))


def _study(patient="p1", birads=(1, 1, 1, 1), density=("C", "C", "C", "C"), findings=((), (), (), ())):
    cells = [("R", "CC"), ("L", "CC"), ("R", "MLO"), ("L", "MLO")]
    views = tuple(
        _view(patient, lat, view, density[i], birads[i], findings[i])
        for i, (lat, view) in enumerate(cells)
    )
    return PatientStudy(patient_id=patient, views=views)


# ---------------------------------------------------------------- loaders

def test_load_basic_row(tmp_path):
    path = _write_csv(tmp_path / "m.csv", [["p1", "R", "CC", "img.png", "C", "1", ""]])
    records, problems = ingest.load_vindr_metadata(path)
    assert problems == []
    assert records == [ViewRecord("p1", "R", "CC", "img.png", "C", 1, ())]


def test_load_rejects_birads_6(tmp_path):
    path = _write_csv(tmp_path / "m.csv", [["p1", "R", "CC", "img.png", "C", "6", ""]])
    with pytest.raises(BadLabelValue):
        ingest.load_vindr_metadata(path)
    records, problems = ingest.load_vindr_metadata(path, strict=False)
    assert records == [] and len(problems) == 1 and problems[0].row_number == 2


def test_load_missing_column(tmp_path):
    path = _write_csv(tmp_path / "m.csv", [], header=["patient_id", "laterality", "view"])
    with pytest.raises(MissingColumn):
        ingest.load_vindr_metadata(path)


def test_load_empty_file(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("")
    with pytest.raises(EmptyFile):
        ingest.load_vindr_metadata(path)
    _write_csv(path, [])
    with pytest.raises(EmptyFile):
        ingest.load_vindr_metadata(path)


def test_load_findings_parsing(tmp_path):
    path = _write_csv(
        tmp_path / "m.csv",
        [["p1", "L", "MLO", "i.png", "A", "4", "Mass; Focal Asymmetry"]],
    )
    records, _ = ingest.load_vindr_metadata(path)
    assert records[0].findings == ("Mass", "Focal Asymmetry")


def test_load_unknown_finding_is_bad_label(tmp_path):
    path = _write_csv(tmp_path / "m.csv", [["p1", "R", "CC", "i.png", "B", "2", "Dragon"]])
    with pytest.raises(BadLabelValue):
        ingest.load_vindr_metadata(path)


def test_load_large_cohort(tmp_path):
    csv_path = make_cohort(tmp_path, n_patients=5000, seed=3, with_images=False)
    records, problems = ingest.load_vindr_metadata(csv_path)
    assert problems == []
    assert len(records) == 20000
    assert len({r.patient_id for r in records}) == 5000


# ---------------------------------------------------------------- assembly

def test_assemble_complete_patient():
    records = [_view("p1", lat, view) for lat in ("R", "L") for view in ("CC", "MLO")]
    studies, problems = ingest.assemble_studies(records)
    assert len(studies) == 1 and problems == []


def test_assemble_incomplete_reports_missing_cells():
    records = [_view("p2", "R", "CC"), _view("p2", "R", "MLO"), _view("p2", "L", "CC")]
    studies, problems = ingest.assemble_studies(records)
    assert studies == []
    assert isinstance(problems[0], IncompleteStudy)
    assert problems[0].missing == [("L", "MLO")]


def test_assemble_duplicate_view():
    records = [_view("p3", lat, view) for lat in ("R", "L") for view in ("CC", "MLO")]
    records.append(_view("p3", "R", "CC"))
    studies, problems = ingest.assemble_studies(records)
    assert studies == []
    assert isinstance(problems[0], DuplicateView)
    assert problems[0].cell == ("R", "CC")
    with pytest.raises(DuplicateView):
        ingest.assemble_studies(records, strict=True)


# ---------------------------------------------------------------- labels

def test_patient_birads_is_max():
    study = _study(birads=(1, 1, 2, 4))
    assert ingest.derive_patient_labels(study)[0] == 4


def test_patient_birads_identity():
    study = _study(birads=(1, 1, 1, 1))
    assert ingest.derive_patient_labels(study)[0] == 1


def test_density_merge_is_max_ordering():
    # exhaustive over all 16 (right, left) pairs
    for right, left in itertools.product("ABCD", repeat=2):
        study = _study(density=(right, left, right, left))
        expected = max((right, left), key="ABCD".index)
        assert ingest.derive_patient_labels(study)[1] == expected


def test_birads_max_property_random_studies():
    rng = random.Random(21)
    for _ in range(200):
        birads = tuple(rng.randint(1, 5) for _ in range(4))
        study = _study(birads=birads)
        label, _ = ingest.derive_patient_labels(study)
        assert all(label >= b for b in birads)
        assert label in birads


# ---------------------------------------------------------------- suspicion

def test_suspicion_mapping_exhaustive():
    assert [ingest.derive_suspicion(b) for b in (1, 2, 3, 4, 5)] == [
        "healthy", "benign", "benign", "suspicious", "suspicious",
    ]


def test_suspicion_rejects_out_of_range():
    with pytest.raises(ValueError):
        ingest.derive_suspicion(0)
    with pytest.raises(ValueError):
        ingest.derive_suspicion(6)


# ---------------------------------------------------------------- reports

def test_synthesize_healthy():
    report = ingest.synthesize_report(_study())
    assert report.findings_text == "Healthy Breast. No Findings"
    assert report.suspicion == "healthy"
    assert report.birads_text == "BI-RADS 1 - Negative. Healthy Breast."
    assert report.flags == parsing.FindingFlags()


def test_synthesize_mass_sets_flag_and_suspicion():
    study = _study(birads=(4, 1, 1, 1), findings=((), ("Mass",), (), ()))
    report = ingest.synthesize_report(study)
    assert report.flags.mass and not report.flags.calcification
    assert report.suspicion == "suspicious"
    assert report.findings_text == "Mass in left CC view"


def test_synthesize_focal_asymmetry_flag():
    study = _study(birads=(2, 1, 1, 1), findings=((), (), ("Focal Asymmetry",), ()))
    report = ingest.synthesize_report(study)
    assert report.flags.asymmetry and not report.flags.mass


def test_synthesize_clause_order_and_join():
    study = _study(
        birads=(4, 2, 1, 1),
        findings=(("Mass",), ("Suspicious Calcification",), (), ()),
    )
    report = ingest.synthesize_report(study)
    assert report.findings_text == (
        "Mass in right CC view; Suspicious Calcification in left CC view"
    )


def test_flags_match_bruteforce_on_random_studies():
    rng = random.Random(4)
    for _ in range(200):
        findings = tuple(
            tuple(rng.sample(ingest.FINDING_VOCABULARY, k=rng.randint(0, 3))) for _ in range(4)
        )
        birads = tuple(rng.randint(1, 5) for _ in range(4))
        study = _study(birads=birads, findings=findings)
        report = ingest.synthesize_report(study)
        everything = [f for per_view in findings for f in per_view]
        assert report.flags.mass == ("Mass" in everything)
        assert report.flags.calcification == ("Suspicious Calcification" in everything)
        assert report.flags.asymmetry == any(
            f in ("Asymmetry", "Focal Asymmetry", "Global Asymmetry") for f in everything
        )


# ---------------------------------------------------------------- split

def test_split_5000_patients():
    ids = [f"p{i}" for i in range(5000)]
    assignment = ingest.split(ids, "patient", 0.8, seed=1)
    assert len(assignment.train_ids) == 4000
    assert len(assignment.test_ids) == 1000


def test_split_image_level_510():
    ids = [f"img{i}" for i in range(510)]
    assignment = ingest.split(ids, "image", 0.8, seed=1)
    assert len(assignment.train_ids) == 408
    assert len(assignment.test_ids) == 102


def test_split_deterministic():
    ids = [f"p{i}" for i in range(10)]
    a = ingest.split(ids, "patient", 0.8, seed=42)
    b = ingest.split(list(reversed(ids)), "patient", 0.8, seed=42)
    assert a.membership == b.membership


def test_split_partition_exact():
    ids = [f"p{i}" for i in range(137)]
    assignment = ingest.split(ids, "patient", 0.8, seed=9)
    assert set(assignment.train_ids) | set(assignment.test_ids) == set(ids)
    assert set(assignment.train_ids) & set(assignment.test_ids) == set()
    assert len(assignment.membership) == len(ids)


def test_split_duplicate_id():
    with pytest.raises(DuplicateId):
        ingest.split(["a", "b", "a"], "patient", 0.8, seed=0)


# ---------------------------------------------------------------- dmid

def test_dmid_extraction(tmp_path):
    d = tmp_path / "dmid"
    d.mkdir()
    (d / "case1.png").write_bytes(_tiny_png())
    (d / "case1.txt").write_text("ACR B composition. BIRADS-2. Benign calcification noted.")
    results, problems = ingest.load_dmid(d)
    assert problems == []
    [(image, report)] = results
    assert report.density_class == "B"
    assert report.birads_class == 2
    assert report.flags.calcification
    assert "calcification" in report.findings_text.lower()


def test_dmid_no_birads_token_fails(tmp_path):
    d = tmp_path / "dmid"
    d.mkdir()
    (d / "case1.png").write_bytes(_tiny_png())
    (d / "case1.txt").write_text("ACR B. Nothing else recorded.")
    with pytest.raises(ExtractionFailure):
        ingest.load_dmid(d)
    results, problems = ingest.load_dmid(d, strict=False)
    assert results == [] and isinstance(problems[0], ExtractionFailure)


def test_dmid_missing_pair(tmp_path):
    d = tmp_path / "dmid"
    d.mkdir()
    (d / "case1.png").write_bytes(_tiny_png())
    with pytest.raises(MissingPair):
        ingest.load_dmid(d)


def test_dmid_510_pairs(tmp_path):
    d = make_dmid_dir(tmp_path / "dmid", n_images=510, seed=5, image_side=8)
    results, problems = ingest.load_dmid(d)
    assert problems == []
    assert len(results) == 510


def test_dmid_healthy_report_uses_sentinel(tmp_path):
    d = tmp_path / "dmid"
    d.mkdir()
    (d / "c.png").write_bytes(_tiny_png())
    (d / "c.txt").write_text("ACR A. BIRADS-1. Unremarkable study.")
    [(_, report)], _ = ingest.load_dmid(d)
    assert report.findings_text == "Healthy Breast. No Findings"
    assert report.suspicion == "healthy"


# ---------------------------------------------------------------- jsonl round trip

def test_ground_truth_jsonl_round_trip(tmp_path):
    rng = random.Random(13)
    items = []
    for i in range(50):
        findings = tuple(
            tuple(rng.sample(ingest.FINDING_VOCABULARY, k=rng.randint(0, 2))) for _ in range(4)
        )
        study = _study(
            patient=f"p{i}",
            birads=tuple(rng.randint(1, 5) for _ in range(4)),
            density=tuple(rng.choice("ABCD") for _ in range(4)),
            findings=findings,
        )
        items.append((study.patient_id, ingest.synthesize_report(study)))
    out = tmp_path / "gt.jsonl"
    ingest.write_ground_truth_jsonl(items, out)
    lines = out.read_text().splitlines()
    assert len(lines) == 50
    for (patient_id, report), line in zip(items, lines):
        obj = json.loads(line)
        assert obj["image_id"] == patient_id
        assert set(obj) == {"image_id", "breast_density", "BI-RADS", "findings", "suspicion"}
        parsed = parsing.parse(line)
        assert parsed.status is parsing.ParseStatus.PARSED
        assert parsed.birads_class == report.birads_class
        assert parsed.density_class == report.density_class
        assert parsed.suspicion == report.suspicion
        assert parsed.flags == report.flags


def _tiny_png() -> bytes:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.new("L", (4, 4)).save(buf, format="PNG")
    return buf.getvalue()
