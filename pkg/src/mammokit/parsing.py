"""Turn free-form model output into structured report labels.

Models are asked to answer with a small JSON object (breast_density,
findings, BI-RADS, suspicion) but routinely wrap it in prose or code
fences, drop keys, or answer in plain text. Everything here is total:
bad input degrades the parse status, it never raises.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from enum import Enum

HEALTHY_SENTINEL = "Healthy Breast. No Findings"

SUSPICION_LABELS = ("healthy", "benign", "suspicious")

# Flag name -> stem matched as a substring of a token ("asymmetr" covers
# asymmetry / asymmetries / Focal Asymmetry etc.).
_FLAG_STEMS = {"mass": "mass", "calcification": "calcification", "asymmetry": "asymmetr"}

_NEGATIONS = {"no", "without", "absent"}
_NEGATION_WINDOW = 3

_FENCE_RE = re.compile(r"```[a-zA-Z]*\s*(.*?)\s*```", re.DOTALL)
_BIRADS_TOKEN_RE = re.compile(r"bi[\s\-_.]*rads", re.IGNORECASE)
_BARE_BIRADS_RE = re.compile(r"\s*([1-5])\b")
_DENSITY_RE = re.compile(r"\b(?:acr|density)\b[\s:\-]*([a-d])\b", re.IGNORECASE)


class ParseStatus(str, Enum):
    PARSED = "parsed"
    PARTIAL_PARSE = "partial_parse"
    PARSE_FAILURE = "parse_failure"


@dataclass(frozen=True)
class FindingFlags:
    mass: bool = False
    calcification: bool = False
    asymmetry: bool = False

    def as_dict(self) -> dict[str, bool]:
        return {"mass": self.mass, "calcification": self.calcification, "asymmetry": self.asymmetry}


@dataclass(frozen=True)
class ParsedReport:
    status: ParseStatus
    density_class: str | None
    birads_class: int | None
    suspicion: str | None
    findings_text: str | None
    flags: FindingFlags | None
    raw_excerpt: str

    def as_dict(self) -> dict:
        return {
            "status": self.status.value,
            "density_class": self.density_class,
            "birads_class": self.birads_class,
            "suspicion": self.suspicion,
            "findings_text": self.findings_text,
            "flags": self.flags.as_dict() if self.flags is not None else None,
            "raw_excerpt": self.raw_excerpt,
        }


def extract_object(text: str) -> str | None:
    """Return the first balanced-brace span of `text` that parses as a JSON object.

    Code fences are stripped first so ```json ... ``` wrappers cannot hide
    the object. Returns None when no such span exists.
    """
    if not text:
        return None
    stripped = _FENCE_RE.sub(lambda m: m.group(1), text)
    decoder = json.JSONDecoder()
    for brace in re.finditer(r"\{", stripped):
        start = brace.start()
        try:
            obj, end = decoder.raw_decode(stripped, start)
        except ValueError:
            continue
        if isinstance(obj, dict):
            return stripped[start:end]
    return None


def normalize_birads(text: str | None, from_schema_field: bool = False) -> int | None:
    """Extract a BI-RADS category 1..5 from text.

    Matches "BI-RADS" / "BIRADS" / "BI RADS" (any case, dashes or dots)
    followed within 8 characters by a digit. A bare leading digit is
    accepted only when the text came from the schema's BI-RADS key, where
    values like "4 - Suspicious abnormality" are legal.
    """
    if not text:
        return None
    if from_schema_field:
        m = _BARE_BIRADS_RE.match(text)
        if m:
            return int(m.group(1))
    for token in _BIRADS_TOKEN_RE.finditer(text):
        window = text[token.end():token.end() + 8]
        digit = re.search(r"\d", window)
        if digit and digit.group() in "12345":
            return int(digit.group())
    return None


def normalize_density(text: str | None) -> str | None:
    """Extract an ACR density letter A..D; first match wins."""
    if not text:
        return None
    m = _DENSITY_RE.search(text)
    return m.group(1).upper() if m else None


def normalize_suspicion(text: str | None) -> str | None:
    """Extract the three-way suspicion label.

    When several keywords appear the most severe wins
    (suspicious > benign > healthy): "likely benign, not suspicious"
    is still scored suspicious rather than guessing at negation scope.
    """
    if not text:
        return None
    lowered = text.lower()
    for label in ("suspicious", "benign", "healthy"):
        if label in lowered:
            return label
    return None


def _clause_tokens(clause: str) -> list[str]:
    return [t.strip(string.punctuation).lower() for t in clause.split() if t.strip(string.punctuation)]


def extract_flags(findings_text: str) -> FindingFlags:
    """Detect mass / calcification / asymmetry mentions in a findings sentence.

    A stem is suppressed when a negation token (no / without / absent)
    precedes it within 3 tokens inside the same clause; clause boundaries
    are ';' and '.'.
    """
    found = {name: False for name in _FLAG_STEMS}
    if findings_text.strip() == HEALTHY_SENTINEL:
        return FindingFlags()
    for clause in re.split(r"[.;]", findings_text):
        tokens = _clause_tokens(clause)
        for i, token in enumerate(tokens):
            for name, stem in _FLAG_STEMS.items():
                if stem in token:
                    window = tokens[max(0, i - _NEGATION_WINDOW):i]
                    if not _NEGATIONS.intersection(window):
                        found[name] = True
    return FindingFlags(**found)


def _canonical_key(key: str) -> str:
    return re.sub(r"[^a-z0-9]", "", key.lower())


def extract_schema_fields(text: str) -> dict[str, str]:
    """Pull the raw string values of the four schema keys out of model output.

    Key matching tolerates case and punctuation drift ("BI-RADS", "birads",
    "Breast Density" all land on the same slot). Only string values are kept.
    """
    span = extract_object(text)
    if span is None:
        return {}
    try:
        obj = json.loads(span)
    except ValueError:
        return {}
    slots = {"breastdensity": "breast_density", "findings": "findings", "birads": "BI-RADS", "suspicion": "suspicion"}
    fields: dict[str, str] = {}
    for key, value in obj.items():
        slot = slots.get(_canonical_key(str(key)))
        if slot is not None and slot not in fields and isinstance(value, str):
            fields[slot] = value
    return fields


def parse(raw_text: str) -> ParsedReport:
    """Parse model output into a ParsedReport; never raises.

    Fields present in the embedded JSON object are normalized from their
    values; missing label fields fall back to whole-text normalization.
    The findings sentence has no whole-text fallback, so a fully Parsed
    status requires the JSON object.
    """
    raw_text = raw_text if isinstance(raw_text, str) else ""
    excerpt = raw_text[:512]
    fields = extract_schema_fields(raw_text)

    density = normalize_density(fields.get("breast_density"))
    if density is None and "breast_density" not in fields:
        density = normalize_density(raw_text)

    birads = normalize_birads(fields.get("BI-RADS"), from_schema_field=True)
    if birads is None and "BI-RADS" not in fields:
        birads = normalize_birads(raw_text)

    suspicion = normalize_suspicion(fields.get("suspicion"))
    if suspicion is None and "suspicion" not in fields:
        suspicion = normalize_suspicion(raw_text)

    findings_text = fields.get("findings")
    flags = extract_flags(findings_text) if findings_text is not None else None

    extracted = sum(1 for v in (density, birads, suspicion, findings_text) if v is not None)
    if extracted == 4:
        status = ParseStatus.PARSED
    elif extracted == 0:
        status = ParseStatus.PARSE_FAILURE
    else:
        status = ParseStatus.PARTIAL_PARSE
    return ParsedReport(
        status=status,
        density_class=density,
        birads_class=birads,
        suspicion=suspicion,
        findings_text=findings_text,
        flags=flags,
        raw_excerpt=excerpt,
    )
