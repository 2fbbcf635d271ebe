"""Load mammography metadata, assemble per-patient studies, and synthesize
reference reports and splits.

Two dataset styles are supported: a metadata CSV with one row per view
(four views per patient) and a directory of image/plain-text report pairs.
Label extraction for the latter reuses the same normalizers that parse
model output, so there is exactly one grammar for labels in the project.
"""

from __future__ import annotations

import csv
import json
import random
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from . import parsing
from .parsing import FindingFlags, HEALTHY_SENTINEL

LATERALITIES = ("R", "L")
VIEWS = ("CC", "MLO")
DENSITY_CLASSES = ("A", "B", "C", "D")
BIRADS_CLASSES = (1, 2, 3, 4, 5)

# Closed finding vocabulary; the flag columns below key off exact membership.
FINDING_VOCABULARY = (
    "Mass",
    "Suspicious Calcification",
    "Architectural Distortion",
    "Asymmetry",
    "Focal Asymmetry",
    "Global Asymmetry",
    "Suspicious Lymph Nodes",
    "Nipple Retraction",
    "Skin Retraction",
    "Skin Thickening",
)
_ASYMMETRY_CATEGORIES = {"Asymmetry", "Focal Asymmetry", "Global Asymmetry"}

METADATA_COLUMNS = ("patient_id", "laterality", "view", "image_path", "density", "birads", "findings")

_LATERALITY_WORD = {"R": "right", "L": "left"}

DENSITY_TEXT = {
    "A": "Density A - Almost entirely fatty. Most of the breast is made of fatty tissue, "
         "which makes masses and other findings easier to see.",
    "B": "Density B - Scattered fibroglandular densities. A few scattered areas of dense "
         "glandular and fibrous tissue against a mostly fatty background.",
    "C": "Density C - Heterogeneously Dense. More of the breast is made of dense glandular "
         "and fibrous tissue. This can make it hard to see small masses in or around the "
         "dense tissue, which also appear as white areas.",
    "D": "Density D - Extremely Dense. Almost all of the breast is dense glandular and "
         "fibrous tissue, making it hard to see masses or other findings that may appear "
         "as white areas on the mammogram.",
}

BIRADS_TEXT = {
    1: "BI-RADS 1 - Negative. Healthy Breast.",
    2: "BI-RADS 2 - Benign (non-cancerous) finding",
    3: "BI-RADS 3 - Probably benign. Short-term follow-up recommended.",
    4: "BI-RADS 4 - Suspicious abnormality. Biopsy needed.",
    5: "BI-RADS 5 - Highly suggestive of malignancy. High probability of cancer.",
}


class IngestError(Exception):
    pass


class MissingColumn(IngestError):
    def __init__(self, column: str):
        super().__init__(f"metadata file is missing required column {column!r}")
        self.column = column


class EmptyFile(IngestError):
    pass


class BadLabelValue(IngestError):
    def __init__(self, row_number: int, detail: str):
        super().__init__(f"row {row_number}: {detail}")
        self.row_number = row_number
        self.detail = detail


class IncompleteStudy(IngestError):
    def __init__(self, patient_id: str, missing: list[tuple[str, str]]):
        cells = ", ".join(f"({lat}, {view})" for lat, view in missing)
        super().__init__(f"patient {patient_id}: missing views {cells}")
        self.patient_id = patient_id
        self.missing = missing


class DuplicateView(IngestError):
    def __init__(self, patient_id: str, cell: tuple[str, str]):
        super().__init__(f"patient {patient_id}: duplicate view {cell}")
        self.patient_id = patient_id
        self.cell = cell


class DuplicateId(IngestError):
    pass


class MissingPair(IngestError):
    def __init__(self, path: Path):
        super().__init__(f"unpaired file: {path}")
        self.path = path


class ExtractionFailure(IngestError):
    def __init__(self, path: Path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path
        self.detail = detail


@dataclass(frozen=True)
class ViewRecord:
    patient_id: str
    laterality: str  # "R" | "L"
    view: str        # "CC" | "MLO"
    image_ref: str
    density: str     # "A".."D"
    birads: int      # 1..5
    findings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise ValueError(f"laterality must be one of {LATERALITIES}, got {self.laterality!r}")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        if self.density not in DENSITY_CLASSES:
            raise ValueError(f"density must be one of {DENSITY_CLASSES}, got {self.density!r}")
        if self.birads not in BIRADS_CLASSES:
            raise ValueError(f"birads must be in {BIRADS_CLASSES}, got {self.birads!r}")
        unknown = [f for f in self.findings if f not in FINDING_VOCABULARY]
        if unknown:
            raise ValueError(f"unknown finding categories: {unknown}")


@dataclass(frozen=True)
class PatientStudy:
    patient_id: str
    views: tuple[ViewRecord, ...]

    def __post_init__(self):
        cells = [(v.laterality, v.view) for v in self.views]
        expected = {(lat, view) for lat in LATERALITIES for view in VIEWS}
        if len(self.views) != 4 or set(cells) != expected or len(set(cells)) != 4:
            raise ValueError(f"patient {self.patient_id}: views must cover the 2x2 grid exactly once")

    def view(self, laterality: str, view: str) -> ViewRecord:
        for v in self.views:
            if v.laterality == laterality and v.view == view:
                return v
        raise KeyError((laterality, view))

    def ordered_views(self) -> tuple[ViewRecord, ViewRecord, ViewRecord, ViewRecord]:
        """Views in the canonical composite order: R-CC, L-CC, R-MLO, L-MLO."""
        return (self.view("R", "CC"), self.view("L", "CC"), self.view("R", "MLO"), self.view("L", "MLO"))


@dataclass(frozen=True)
class GroundTruthReport:
    density_class: str
    density_text: str
    birads_class: int
    birads_text: str
    findings_text: str
    suspicion: str
    flags: FindingFlags

    def schema_dict(self, image_id: str) -> dict:
        """The JSON object shape shared with prompts, exemplars, and parsing."""
        return {
            "image_id": image_id,
            "breast_density": self.density_text,
            "BI-RADS": self.birads_text,
            "findings": self.findings_text,
            "suspicion": self.suspicion,
        }

    def as_dict(self, image_id: str) -> dict:
        d = self.schema_dict(image_id)
        d.update(
            {
                "birads_class": self.birads_class,
                "density_class": self.density_class,
                "flags": self.flags.as_dict(),
            }
        )
        return d


@dataclass(frozen=True)
class SplitAssignment:
    unit: str  # "patient" | "image"
    seed: int
    ratio: float
    membership: dict[str, str] = field(hash=False)

    def ids(self, bucket: str) -> list[str]:
        return sorted(i for i, b in self.membership.items() if b == bucket)

    @property
    def train_ids(self) -> list[str]:
        return self.ids("train")

    @property
    def test_ids(self) -> list[str]:
        return self.ids("test")


def derive_suspicion(birads_class: int) -> str:
    """1 -> healthy, 2-3 -> benign, 4-5 -> suspicious."""
    if birads_class not in BIRADS_CLASSES:
        raise ValueError(f"birads out of range: {birads_class}")
    if birads_class == 1:
        return "healthy"
    if birads_class <= 3:
        return "benign"
    return "suspicious"


def load_vindr_metadata(path: str | Path, strict: bool = True) -> tuple[list[ViewRecord], list[BadLabelValue]]:
    """Load the per-view metadata CSV.

    Returns (records, problems). With strict=True (default) the first bad
    row raises; with strict=False bad rows are collected into `problems`
    so they are reported rather than silently dropped. An absent findings
    cell means "no findings", not an error.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyFile(f"{path} has no header row")
        for column in METADATA_COLUMNS:
            if column not in reader.fieldnames:
                raise MissingColumn(column)
        records: list[ViewRecord] = []
        problems: list[BadLabelValue] = []
        for row_number, row in enumerate(reader, start=2):
            try:
                records.append(_record_from_row(row))
            except (ValueError, KeyError) as exc:
                problem = BadLabelValue(row_number, str(exc))
                if strict:
                    raise problem from exc
                problems.append(problem)
    if not records and not problems:
        raise EmptyFile(f"{path} contains a header but no rows")
    return records, problems


def _record_from_row(row: dict) -> ViewRecord:
    findings_cell = (row.get("findings") or "").strip()
    findings = tuple(f.strip() for f in findings_cell.split(";") if f.strip())
    birads_raw = (row["birads"] or "").strip()
    if not re.fullmatch(r"[0-9]+", birads_raw):
        raise ValueError(f"birads not an integer: {birads_raw!r}")
    return ViewRecord(
        patient_id=row["patient_id"].strip(),
        laterality=row["laterality"].strip(),
        view=row["view"].strip(),
        image_ref=row["image_path"].strip(),
        density=row["density"].strip(),
        birads=int(birads_raw),
        findings=findings,
    )


def assemble_studies(
    records: list[ViewRecord], strict: bool = False
) -> tuple[list[PatientStudy], list[IngestError]]:
    """Group view records into complete four-view studies.

    Incomplete patients and duplicate cells are returned in the problem
    list (or raised when strict=True); they never become studies.
    """
    by_patient: dict[str, dict[tuple[str, str], ViewRecord]] = {}
    problems: list[IngestError] = []
    bad_patients: set[str] = set()
    for record in records:
        cell = (record.laterality, record.view)
        views = by_patient.setdefault(record.patient_id, {})
        if cell in views:
            problem = DuplicateView(record.patient_id, cell)
            if strict:
                raise problem
            problems.append(problem)
            bad_patients.add(record.patient_id)
            continue
        views[cell] = record

    studies = []
    for patient_id in sorted(by_patient):
        views = by_patient[patient_id]
        if patient_id in bad_patients:
            continue
        missing = [
            (lat, view) for lat in LATERALITIES for view in VIEWS if (lat, view) not in views
        ]
        if missing:
            problem = IncompleteStudy(patient_id, missing)
            if strict:
                raise problem
            problems.append(problem)
            continue
        studies.append(PatientStudy(patient_id=patient_id, views=tuple(views.values())))
    return studies, problems


def derive_patient_labels(study: PatientStudy) -> tuple[int, str]:
    """Patient-level (birads, density).

    BI-RADS is the max across the four views. Density is the max under
    A < B < C < D when the two breasts disagree: the denser reading wins,
    the same conservative direction as the BI-RADS rule.
    """
    birads = max(v.birads for v in study.views)
    density = max((v.density for v in study.views), key=DENSITY_CLASSES.index)
    return birads, density


def synthesize_report(study: PatientStudy) -> GroundTruthReport:
    """Build the reference report for a complete study.

    Findings are rendered one clause per (category, view) as
    "<Finding> in <laterality> <view> view", joined by "; ", in the
    canonical view order; an empty list becomes the healthy sentinel.
    """
    birads_class, density_class = derive_patient_labels(study)
    clauses = []
    mass = calcification = asymmetry = False
    for view in study.ordered_views():
        for finding in view.findings:
            clauses.append(f"{finding} in {_LATERALITY_WORD[view.laterality]} {view.view} view")
            mass = mass or finding == "Mass"
            calcification = calcification or finding == "Suspicious Calcification"
            asymmetry = asymmetry or finding in _ASYMMETRY_CATEGORIES
    findings_text = "; ".join(clauses) if clauses else HEALTHY_SENTINEL
    return GroundTruthReport(
        density_class=density_class,
        density_text=DENSITY_TEXT[density_class],
        birads_class=birads_class,
        birads_text=BIRADS_TEXT[birads_class],
        findings_text=findings_text,
        suspicion=derive_suspicion(birads_class),
        flags=FindingFlags(mass=mass, calcification=calcification, asymmetry=asymmetry),
    )


def split(ids: list[str], unit: str, ratio: float, seed: int) -> SplitAssignment:
    """Deterministic train/test split: seeded shuffle, first floor(ratio*N) train."""
    if unit not in ("patient", "image"):
        raise ValueError(f"unit must be 'patient' or 'image', got {unit!r}")
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise DuplicateId(f"duplicate id: {i!r}")
        seen.add(i)
    ordered = sorted(ids)
    random.Random(seed).shuffle(ordered)
    # Fraction(str(...)) keeps floor semantics exact for decimal ratios like 0.8.
    n_train = int(Fraction(str(ratio)) * len(ordered))
    membership = {i: ("train" if pos < n_train else "test") for pos, i in enumerate(ordered)}
    return SplitAssignment(unit=unit, seed=seed, ratio=ratio, membership=membership)


_FINDING_STEM_RE = re.compile(
    r"mass|calcification|asymmetr|distortion|lymph|retraction|thickening", re.IGNORECASE
)


def load_dmid(
    report_dir: str | Path, strict: bool = True
) -> tuple[list[tuple[str, GroundTruthReport]], list[IngestError]]:
    """Load <id>.png / <id>.txt pairs from one directory.

    Density and BI-RADS come from the shared normalizers; sentences that
    mention a finding stem become the findings text (healthy sentinel when
    none do). A report with no recoverable density or BI-RADS token is an
    ExtractionFailure; unpaired files are MissingPair.
    """
    report_dir = Path(report_dir)
    images = {p.stem: p for p in sorted(report_dir.glob("*.png"))}
    texts = {p.stem: p for p in sorted(report_dir.glob("*.txt"))}
    problems: list[IngestError] = []
    for stem in sorted(set(images) ^ set(texts)):
        problem = MissingPair(images.get(stem) or texts[stem])
        if strict:
            raise problem
        problems.append(problem)

    results: list[tuple[str, GroundTruthReport]] = []
    for stem in sorted(set(images) & set(texts)):
        text = texts[stem].read_text(encoding="utf-8")
        density = parsing.normalize_density(text)
        birads = parsing.normalize_birads(text)
        if density is None or birads is None:
            missing = "density" if density is None else "BI-RADS"
            problem = ExtractionFailure(texts[stem], f"no {missing} token found")
            if strict:
                raise problem
            problems.append(problem)
            continue
        sentences = [s.strip() for s in re.split(r"[.;\n]", text) if s.strip()]
        finding_sentences = [s for s in sentences if _FINDING_STEM_RE.search(s)]
        findings_text = "; ".join(finding_sentences) if finding_sentences else HEALTHY_SENTINEL
        report = GroundTruthReport(
            density_class=density,
            density_text=DENSITY_TEXT[density],
            birads_class=birads,
            birads_text=BIRADS_TEXT[birads],
            findings_text=findings_text,
            suspicion=derive_suspicion(birads),
            flags=parsing.extract_flags(findings_text),
        )
        results.append((str(images[stem]), report))
    return results, problems


def write_ground_truth_jsonl(items: list[tuple[str, GroundTruthReport]], path: str | Path) -> None:
    """One schema object per line: image_id, breast_density, BI-RADS, findings, suspicion."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for image_id, report in items:
            fh.write(json.dumps(report.schema_dict(image_id)) + "\n")
