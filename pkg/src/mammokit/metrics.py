"""Classification metrics, text-similarity scores, and per-task aggregation.

Confusion matrices track an extra "unparsed" bucket per gold class:
model outputs from which no label could be extracted count as wrong
(a false negative for their gold class) instead of being dropped, which
would quietly inflate accuracy. Matrix updates commute, so shards merged
cell-wise equal a sequential pass exactly.

"Accuracy" is reported as plain (micro) accuracy, which for single-label
multiclass data equals micro-averaged recall; precision, recall, F1, and
specificity are macro averages. That combination reproduces the pattern
where reported accuracy and recall coincide on fully parsed runs.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass

import numpy as np

from . import parsing

CLASSIFICATION_TASKS = ("BI-RADS", "Density", "Suspicion", "Mass", "Calcification", "Asymmetry")
TEXT_TASKS = ("BiradsText", "DensityText", "FindingsText")

# (task, gold field, parsed field) wiring for label tasks.
_LABEL_TASKS = (
    ("BI-RADS", (1, 2, 3, 4, 5), "birads_class", "birads_class"),
    ("Density", ("A", "B", "C", "D"), "density_class", "density_class"),
    ("Suspicion", ("healthy", "benign", "suspicious"), "suspicion", "suspicion"),
)
_FLAG_TASKS = (("Mass", "mass"), ("Calcification", "calcification"), ("Asymmetry", "asymmetry"))
# (task, gold text key, schema field of the model object)
_TEXT_TASKS = (
    ("BiradsText", "BI-RADS", "BI-RADS"),
    ("DensityText", "breast_density", "breast_density"),
    ("FindingsText", "findings", "findings"),
)


class MetricsError(Exception):
    pass


class UnknownLabel(MetricsError):
    pass


class EmptyMatrix(MetricsError):
    pass


class MixedExperiments(MetricsError):
    pass


class EmbedderFailure(MetricsError):
    pass


class ConfusionMatrix:
    """K x K counts (rows = gold, cols = predicted) plus per-gold-class
    counts of unparsable outputs."""

    def __init__(self, classes):
        self.classes = tuple(classes)
        self._index = {c: i for i, c in enumerate(self.classes)}
        self.counts = np.zeros((len(self.classes), len(self.classes)), dtype=np.int64)
        self.unparsed = np.zeros(len(self.classes), dtype=np.int64)

    def update(self, gold, parsed) -> None:
        """Count one case; `parsed` is None when no label was extracted."""
        if gold not in self._index:
            raise UnknownLabel(f"gold label {gold!r} not in {self.classes}")
        if parsed is None:
            self.unparsed[self._index[gold]] += 1
            return
        if parsed not in self._index:
            raise UnknownLabel(f"predicted label {parsed!r} not in {self.classes}")
        self.counts[self._index[gold], self._index[parsed]] += 1

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise UnknownLabel("cannot merge matrices over different class lists")
        merged = ConfusionMatrix(self.classes)
        merged.counts = self.counts + other.counts
        merged.unparsed = self.unparsed + other.unparsed
        return merged

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.unparsed.sum())

    @property
    def total_unparsed(self) -> int:
        return int(self.unparsed.sum())


@dataclass(frozen=True)
class PerClassMetrics:
    label: object
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    specificity: float
    specificity_degenerate: bool


@dataclass(frozen=True)
class ClassificationMetrics:
    micro_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_specificity: float
    per_class: tuple[PerClassMetrics, ...]

    def as_dict(self) -> dict:
        return {
            "micro_accuracy": self.micro_accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "macro_specificity": self.macro_specificity,
        }


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute(cm: ConfusionMatrix) -> ClassificationMetrics:
    """One-vs-rest metrics per class, macro-averaged without weights.

    Unparsed cases are false negatives for their gold class and neither
    true nor false positives for any class. Degenerate 0/0 ratios are 0 by
    convention; for specificity that case is flagged per class.
    """
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix has no cases")
    per_class = []
    for i, label in enumerate(cm.classes):
        tp = int(cm.counts[i, i])
        fn = int(cm.counts[i].sum() - tp + cm.unparsed[i])
        fp = int(cm.counts[:, i].sum() - tp)
        tn = total - tp - fn - fp
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
        specificity = _ratio(tn, tn + fp)
        per_class.append(
            PerClassMetrics(
                label=label,
                tp=tp,
                fp=fp,
                fn=fn,
                tn=tn,
                precision=precision,
                recall=recall,
                f1=f1,
                specificity=specificity,
                specificity_degenerate=(tn + fp) == 0,
            )
        )
    return ClassificationMetrics(
        micro_accuracy=float(np.trace(cm.counts)) / total,
        macro_precision=sum(c.precision for c in per_class) / len(per_class),
        macro_recall=sum(c.recall for c in per_class) / len(per_class),
        macro_f1=sum(c.f1 for c in per_class) / len(per_class),
        macro_specificity=sum(c.specificity for c in per_class) / len(per_class),
        per_class=tuple(per_class),
    )


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokens with punctuation stripped from the edges."""
    return [t.strip(string.punctuation).lower() for t in text.split() if t.strip(string.punctuation)]


@dataclass(frozen=True)
class ScoreTriple:
    precision: float
    recall: float
    f: float

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f": self.f}


@dataclass(frozen=True)
class TextScores:
    rouge_l: ScoreTriple
    bert_score: ScoreTriple

    def as_dict(self) -> dict:
        return {"rouge_l": self.rouge_l.as_dict(), "bert_score": self.bert_score.as_dict()}


def _lcs_length(a: list[str], b: list[str]) -> int:
    # two-row dynamic program
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> ScoreTriple:
    """ROUGE-L with beta = 1: LCS length over candidate/reference token
    counts, harmonic-mean F. Empty vs empty scores 1, empty vs non-empty 0."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand and not ref:
        return ScoreTriple(1.0, 1.0, 1.0)
    if not cand or not ref:
        return ScoreTriple(0.0, 0.0, 0.0)
    lcs = _lcs_length(cand, ref)
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ScoreTriple(precision, recall, f)


class HashTrigramEmbedder:
    """Deterministic local token embedder: hashed character-trigram counts.

    Stands in for a contextual-embedding model so text similarity is
    reproducible with no model server; suitable wherever a token_embedder
    is accepted.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    def __call__(self, tokens: list[str]) -> np.ndarray:
        out = np.zeros((len(tokens), self.dim), dtype=np.float64)
        for i, token in enumerate(tokens):
            padded = f"#{token}#"
            for j in range(len(padded) - 2):
                tri = padded[j:j + 3]
                bucket = int.from_bytes(hashlib.md5(tri.encode()).digest()[:4], "little") % self.dim
                out[i, bucket] += 1.0
        return out


def bert_score(candidate: str, reference: str, token_embedder) -> ScoreTriple:
    """Greedy maximum-cosine token matching (no IDF weighting).

    Precision averages, over candidate tokens, the best cosine against any
    reference token; recall is symmetric; F is their harmonic mean. Scores
    are clamped to [0, 1]. An empty candidate (or reference) scores 0
    against non-empty text; two empty texts score 1.
    """
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand and not ref:
        return ScoreTriple(1.0, 1.0, 1.0)
    if not cand or not ref:
        return ScoreTriple(0.0, 0.0, 0.0)
    try:
        cand_vecs = np.asarray(token_embedder(cand), dtype=np.float64)
        ref_vecs = np.asarray(token_embedder(ref), dtype=np.float64)
    except MetricsError:
        raise
    except Exception as exc:
        raise EmbedderFailure(str(exc)) from exc
    if cand_vecs.shape[0] != len(cand) or ref_vecs.shape[0] != len(ref):
        raise EmbedderFailure("token embedder did not return one vector per token")

    def _normalize(m: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0  # zero vectors match nothing
        return m / norms

    sims = _normalize(cand_vecs) @ _normalize(ref_vecs).T
    precision = float(np.clip(sims.max(axis=1).mean(), 0.0, 1.0))
    recall = float(np.clip(sims.max(axis=0).mean(), 0.0, 1.0))
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ScoreTriple(precision, recall, f)


@dataclass(frozen=True)
class TaskResult:
    task: str
    kind: str  # "classification" | "text"
    n: int
    metrics: ClassificationMetrics | None = None
    text_scores: TextScores | None = None
    unparsed: int = 0

    def as_dict(self) -> dict:
        out: dict = {"task": self.task, "kind": self.kind, "n": self.n}
        if self.kind == "classification":
            out["metrics"] = self.metrics.as_dict()
            out["unparsed"] = self.unparsed
        else:
            out["scores"] = self.text_scores.as_dict()
        return out


def aggregate(records: list[dict], token_embedder=None) -> list[TaskResult]:
    """Fold result records from one experiment into per-task results.

    Classification tasks come from confusion matrices over gold vs parsed
    labels; text tasks are per-example score means comparing the raw model
    object's field text against the reference text.
    """
    if not records:
        return []
    run_ids = {r.get("run_id") for r in records}
    if len(run_ids) > 1:
        raise MixedExperiments(f"records span experiments {sorted(map(str, run_ids))}")
    if token_embedder is None:
        token_embedder = HashTrigramEmbedder()

    results: list[TaskResult] = []
    for task, classes, gold_key, parsed_key in _LABEL_TASKS:
        cm = ConfusionMatrix(classes)
        for record in records:
            cm.update(record["gold"][gold_key], record["parsed"].get(parsed_key))
        results.append(
            TaskResult(task=task, kind="classification", n=cm.total, metrics=compute(cm),
                       unparsed=cm.total_unparsed)
        )
    for task, flag in _FLAG_TASKS:
        cm = ConfusionMatrix((False, True))
        for record in records:
            parsed_flags = record["parsed"].get("flags")
            pred = None if parsed_flags is None else bool(parsed_flags[flag])
            cm.update(bool(record["gold"]["flags"][flag]), pred)
        results.append(
            TaskResult(task=task, kind="classification", n=cm.total, metrics=compute(cm),
                       unparsed=cm.total_unparsed)
        )
    for task, gold_key, schema_field in _TEXT_TASKS:
        rouge_triples = []
        bert_triples = []
        for record in records:
            fields = parsing.extract_schema_fields(record.get("raw_output", ""))
            candidate = fields.get(schema_field, "")
            reference = record["gold"][gold_key]
            rouge_triples.append(rouge_l(candidate, reference))
            bert_triples.append(bert_score(candidate, reference, token_embedder))
        results.append(
            TaskResult(
                task=task,
                kind="text",
                n=len(records),
                text_scores=TextScores(rouge_l=_mean_triple(rouge_triples),
                                       bert_score=_mean_triple(bert_triples)),
            )
        )
    return results


def _mean_triple(triples: list[ScoreTriple]) -> ScoreTriple:
    return ScoreTriple(
        precision=sum(t.precision for t in triples) / len(triples),
        recall=sum(t.recall for t in triples) / len(triples),
        f=sum(t.f for t in triples) / len(triples),
    )


# Table layout: classification tasks with a paired narrative field show the
# five label metrics plus the two text metrics under one task heading.
_TABLE_LAYOUT = (
    ("BI-RADS", "BI-RADS", "BiradsText"),
    ("Breast Density", "Density", "DensityText"),
    ("Findings", None, "FindingsText"),
    ("Calcification", "Calcification", None),
    ("Mass", "Mass", None),
    ("Asymmetry", "Asymmetry", None),
    ("Suspicion", "Suspicion", None),
)


def table_rows(results: list[TaskResult], prompt: str, model: str) -> list[tuple[str, str, str, str, str]]:
    """Rows of (Task, Metric, Value, Prompt, Model) in the report layout."""
    by_task = {r.task: r for r in results}
    rows = []
    for heading, cls_task, text_task in _TABLE_LAYOUT:
        cls = by_task.get(cls_task) if cls_task else None
        text = by_task.get(text_task) if text_task else None
        if cls is not None:
            m = cls.metrics
            rows.append((heading, "Accuracy", f"{m.micro_accuracy:.4f}", prompt, model))
            rows.append((heading, "Precision", f"{m.macro_precision:.4f}", prompt, model))
            rows.append((heading, "Recall", f"{m.macro_recall:.4f}", prompt, model))
            rows.append((heading, "F1-score", f"{m.macro_f1:.4f}", prompt, model))
            rows.append((heading, "Specificity", f"{m.macro_specificity:.4f}", prompt, model))
            rows.append((heading, "Unparsed", str(cls.unparsed), prompt, model))
        if text is not None:
            s = text.text_scores
            rows.append((heading, "BERTScore", f"{s.bert_score.f:.4f}", prompt, model))
            rows.append((heading, "ROUGE-L", f"{s.rouge_l.f:.4f}", prompt, model))
    return rows


def render_csv(rows: list[tuple], header: tuple[str, ...]) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_markdown(rows: list[tuple], header: tuple[str, ...]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join([" --- "] * len(header)) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines) + "\n"


def results_to_json(results: list[TaskResult]) -> str:
    return json.dumps([r.as_dict() for r in results], indent=2, sort_keys=True) + "\n"
