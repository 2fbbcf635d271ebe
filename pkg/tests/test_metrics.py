import json
import random

import numpy as np
import pytest

from mammokit import metrics
from mammokit.metrics import (
    ConfusionMatrix,
    EmptyMatrix,
    HashTrigramEmbedder,
    MixedExperiments,
    ScoreTriple,
    UnknownLabel,
    aggregate,
    bert_score,
    compute,
    rouge_l,
    tokenize,
)


class OneHotEmbedder:
    def __init__(self, dim=32):
        self.vocab = {}
        self.dim = dim

    def __call__(self, tokens):
        out = np.zeros((len(tokens), self.dim))
        for i, token in enumerate(tokens):
            idx = self.vocab.setdefault(token, len(self.vocab))
            out[i, idx] = 1.0
        return out


# ---------------------------------------------------------------- confusion matrix

def test_update_diagonal():
    cm = ConfusionMatrix((1, 2, 3, 4, 5))
    cm.update(4, 4)
    assert cm.counts[3, 3] == 1 and cm.total == 1


def test_update_unparsed_bucket():
    cm = ConfusionMatrix((1, 2, 3))
    cm.update(2, None)
    assert cm.unparsed[1] == 1 and cm.counts.sum() == 0
    assert cm.total == 1 and cm.total_unparsed == 1


def test_update_unknown_label():
    cm = ConfusionMatrix((1, 2, 3))
    with pytest.raises(UnknownLabel):
        cm.update(9, 1)
    with pytest.raises(UnknownLabel):
        cm.update(1, 9)


def test_compute_perfect_matrix():
    cm = ConfusionMatrix(("a", "b"))
    for _ in range(3):
        cm.update("a", "a")
    for _ in range(2):
        cm.update("b", "b")
    m = compute(cm)
    assert m.micro_accuracy == 1.0
    assert m.macro_precision == m.macro_recall == m.macro_f1 == m.macro_specificity == 1.0


def test_compute_worked_example():
    # counts [[2, 1], [1, 1]]
    cm = ConfusionMatrix((0, 1))
    for gold, pred, n in ((0, 0, 2), (0, 1, 1), (1, 0, 1), (1, 1, 1)):
        for _ in range(n):
            cm.update(gold, pred)
    m = compute(cm)
    assert m.micro_accuracy == pytest.approx(0.6, abs=1e-12)
    assert m.macro_precision == pytest.approx(7 / 12, abs=1e-12)
    assert m.macro_recall == pytest.approx(7 / 12, abs=1e-12)
    assert m.macro_specificity == pytest.approx(7 / 12, abs=1e-12)


def test_compute_degenerate_specificity_flagged():
    cm = ConfusionMatrix(("only",))
    cm.update("only", "only")
    m = compute(cm)
    assert m.per_class[0].precision == 1.0 and m.per_class[0].recall == 1.0
    assert m.per_class[0].specificity == 0.0
    assert m.per_class[0].specificity_degenerate


def test_compute_empty_matrix():
    with pytest.raises(EmptyMatrix):
        compute(ConfusionMatrix((1, 2)))


def _brute_force_metrics(cases, classes):
    """Naive per-class recount from individual (gold, pred-or-None) cases."""
    per = {}
    for c in classes:
        tp = sum(1 for g, p in cases if g == c and p == c)
        fn = sum(1 for g, p in cases if g == c and p != c)
        fp = sum(1 for g, p in cases if g != c and p == c)
        tn = len(cases) - tp - fn - fp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        specificity = tn / (tn + fp) if tn + fp else 0.0
        per[c] = (precision, recall, f1, specificity)
    macro = tuple(sum(v[i] for v in per.values()) / len(classes) for i in range(4))
    micro_acc = sum(1 for g, p in cases if g == p and p is not None) / len(cases)
    return micro_acc, macro


def test_compute_matches_bruteforce_on_random_matrices():
    rng = random.Random(17)
    classes = (1, 2, 3, 4)
    for _ in range(100):
        cm = ConfusionMatrix(classes)
        cases = []
        for _ in range(rng.randint(1, 60)):
            gold = rng.choice(classes)
            pred = rng.choice(list(classes) + [None])
            cm.update(gold, pred)
            cases.append((gold, pred))
        m = compute(cm)
        micro_acc, (mp, mr, mf, ms) = _brute_force_metrics(cases, classes)
        assert m.micro_accuracy == pytest.approx(micro_acc, abs=1e-12)
        assert m.macro_precision == pytest.approx(mp, abs=1e-12)
        assert m.macro_recall == pytest.approx(mr, abs=1e-12)
        assert m.macro_f1 == pytest.approx(mf, abs=1e-12)
        assert m.macro_specificity == pytest.approx(ms, abs=1e-12)


def test_merge_equals_sequential():
    rng = random.Random(23)
    classes = ("x", "y", "z")
    sequential = ConfusionMatrix(classes)
    shards = [ConfusionMatrix(classes) for _ in range(4)]
    for i in range(200):
        gold = rng.choice(classes)
        pred = rng.choice(list(classes) + [None])
        sequential.update(gold, pred)
        shards[i % 4].update(gold, pred)
    merged = shards[0]
    for shard in shards[1:]:
        merged = merged.merge(shard)
    assert np.array_equal(merged.counts, sequential.counts)
    assert np.array_equal(merged.unparsed, sequential.unparsed)


def test_accuracy_equals_micro_recall_when_fully_parsed():
    rng = random.Random(5)
    classes = (1, 2, 3, 4, 5)
    cm = ConfusionMatrix(classes)
    for _ in range(500):
        cm.update(rng.choice(classes), rng.choice(classes))
    m = compute(cm)
    micro_recall = sum(c.tp for c in m.per_class) / sum(c.tp + c.fn for c in m.per_class)
    assert m.micro_accuracy == pytest.approx(micro_recall, abs=1e-12)


# ---------------------------------------------------------------- rouge

def test_rouge_worked_example():
    triple = rouge_l("the cat sat", "the cat")
    assert triple.precision == pytest.approx(2 / 3, abs=1e-12)
    assert triple.recall == pytest.approx(1.0, abs=1e-12)
    assert triple.f == pytest.approx(0.8, abs=1e-12)


def test_rouge_identical():
    assert rouge_l("Mass in left CC view", "mass in left cc view.").f == pytest.approx(1.0)


def test_rouge_disjoint():
    assert rouge_l("alpha beta", "gamma delta") == ScoreTriple(0.0, 0.0, 0.0)


def test_rouge_empty_conventions():
    assert rouge_l("", "") == ScoreTriple(1.0, 1.0, 1.0)
    assert rouge_l("", "something") == ScoreTriple(0.0, 0.0, 0.0)
    assert rouge_l("something", "") == ScoreTriple(0.0, 0.0, 0.0)


def test_tokenize_strips_edge_punctuation():
    assert tokenize("Mass, in (left) CC view.") == ["mass", "in", "left", "cc", "view"]


def _full_table_lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def test_rouge_matches_independent_lcs_dp():
    rng = random.Random(31)
    vocab = ["mass", "view", "left", "right", "cc", "mlo", "dense", "benign", "no", "findings"]
    for _ in range(50):
        cand_tokens = [rng.choice(vocab) for _ in range(rng.randint(0, 12))]
        ref_tokens = [rng.choice(vocab) for _ in range(rng.randint(0, 12))]
        triple = rouge_l(" ".join(cand_tokens), " ".join(ref_tokens))
        lcs = _full_table_lcs(cand_tokens, ref_tokens)
        if cand_tokens and ref_tokens:
            assert triple.precision == lcs / len(cand_tokens)
            assert triple.recall == lcs / len(ref_tokens)


# ---------------------------------------------------------------- bert score

def test_bert_score_identical_tokens():
    triple = bert_score("mass in left view", "mass in left view", HashTrigramEmbedder())
    assert triple.f == pytest.approx(1.0, abs=1e-12)


def test_bert_score_one_hot_worked_example():
    triple = bert_score("a b", "a c", OneHotEmbedder())
    assert triple == ScoreTriple(0.5, 0.5, 0.5)


def test_bert_score_empty_candidate():
    assert bert_score("", "reference text", HashTrigramEmbedder()) == ScoreTriple(0.0, 0.0, 0.0)


def test_bert_score_reduces_to_token_overlap_under_one_hot():
    rng = random.Random(41)
    vocab = ["a", "b", "c", "d", "e", "f"]
    for _ in range(50):
        cand = [rng.choice(vocab) for _ in range(rng.randint(1, 8))]
        ref = [rng.choice(vocab) for _ in range(rng.randint(1, 8))]
        triple = bert_score(" ".join(cand), " ".join(ref), OneHotEmbedder())
        precision = sum(1 for t in cand if t in set(ref)) / len(cand)
        recall = sum(1 for t in ref if t in set(cand)) / len(ref)
        assert triple.precision == pytest.approx(precision, abs=1e-12)
        assert triple.recall == pytest.approx(recall, abs=1e-12)


def test_bert_score_embedder_failure_propagates():
    def broken(tokens):
        raise RuntimeError("no embeddings today")

    with pytest.raises(metrics.EmbedderFailure):
        bert_score("a", "b", broken)


def test_bert_score_clamped():
    def weird(tokens):
        return -np.ones((len(tokens), 4))

    triple = bert_score("a b", "c d", weird)
    assert 0.0 <= triple.precision <= 1.0 and 0.0 <= triple.recall <= 1.0


# ---------------------------------------------------------------- aggregate

def _gold(birads=1, density="C", suspicion="healthy", findings="Healthy Breast. No Findings",
          mass=False, calcification=False, asymmetry=False):
    return {
        "image_id": "case",
        "breast_density": f"Density {density} - text.",
        "BI-RADS": f"BI-RADS {birads} - text.",
        "findings": findings,
        "suspicion": suspicion,
        "birads_class": birads,
        "density_class": density,
        "flags": {"mass": mass, "calcification": calcification, "asymmetry": asymmetry},
    }


def _record(gold, parsed=None, raw="", run_id="exp1", case_id="c0"):
    if parsed is None:
        parsed = {
            "status": "parsed",
            "birads_class": gold["birads_class"],
            "density_class": gold["density_class"],
            "suspicion": gold["suspicion"],
            "findings_text": gold["findings"],
            "flags": dict(gold["flags"]),
        }
        raw = raw or json.dumps(
            {
                "breast_density": gold["breast_density"],
                "findings": gold["findings"],
                "BI-RADS": gold["BI-RADS"],
                "suspicion": gold["suspicion"],
            }
        )
    return {"run_id": run_id, "case_id": case_id, "raw_output": raw, "parsed": parsed, "gold": gold}


def test_aggregate_all_correct():
    records = [_record(_gold(birads=b), case_id=f"c{b}") for b in (1, 2, 3)]
    results = {r.task: r for r in aggregate(records)}
    assert results["BI-RADS"].metrics.micro_accuracy == 1.0
    assert results["BI-RADS"].n == 3
    assert results["BiradsText"].text_scores.rouge_l.f == pytest.approx(1.0)
    assert results["FindingsText"].text_scores.bert_score.f == pytest.approx(1.0)


def test_aggregate_mixed_experiments():
    records = [_record(_gold(), run_id="exp1"), _record(_gold(), run_id="exp2")]
    with pytest.raises(MixedExperiments):
        aggregate(records)


def test_aggregate_unparsed_counted():
    failure = {"status": "parse_failure", "birads_class": None, "density_class": None,
               "suspicion": None, "findings_text": None, "flags": None}
    records = [_record(_gold()), _record(_gold(birads=4, suspicion="suspicious"), parsed=failure, raw="")]
    results = {r.task: r for r in aggregate(records)}
    assert results["BI-RADS"].unparsed == 1
    assert results["BI-RADS"].metrics.micro_accuracy == pytest.approx(0.5)
    assert results["Mass"].unparsed == 1


def test_aggregate_accuracy_equals_micro_recall_pattern():
    rng = random.Random(3)
    records = []
    for i in range(40):
        gold_b = rng.randint(1, 5)
        pred_b = rng.randint(1, 5)
        gold = _gold(birads=gold_b)
        parsed = {
            "status": "parsed", "birads_class": pred_b, "density_class": "C",
            "suspicion": "healthy", "findings_text": "Healthy Breast. No Findings",
            "flags": {"mass": False, "calcification": False, "asymmetry": False},
        }
        records.append(_record(gold, parsed=parsed, raw="{}", case_id=f"c{i}"))
    result = next(r for r in aggregate(records) if r.task == "BI-RADS")
    micro_recall = sum(c.tp for c in result.metrics.per_class) / sum(
        c.tp + c.fn for c in result.metrics.per_class
    )
    assert result.metrics.micro_accuracy == pytest.approx(micro_recall, abs=1e-12)


def test_table_rows_layout():
    records = [_record(_gold(birads=b), case_id=f"c{b}") for b in (1, 2)]
    rows = metrics.table_rows(aggregate(records), prompt="zero_shot", model="m")
    headings = [r[0] for r in rows]
    assert headings.index("BI-RADS") < headings.index("Breast Density") < headings.index("Findings")
    birads_metrics = [r[1] for r in rows if r[0] == "BI-RADS"]
    assert birads_metrics == ["Accuracy", "Precision", "Recall", "F1-score", "Specificity",
                              "Unparsed", "BERTScore", "ROUGE-L"]
    findings_metrics = [r[1] for r in rows if r[0] == "Findings"]
    assert findings_metrics == ["BERTScore", "ROUGE-L"]
