"""Robust output parsing and the metrics that consume it.

Model answers arrive as clean JSON, fenced JSON, prose-wrapped JSON, or
free text; parsing never raises and its status records how much was
recovered. Unparsable answers land in an explicit bucket that scores as
wrong rather than being dropped.
"""

import json

from mammokit import metrics, parsing

ANSWERS = [
    json.dumps(
        {
            "breast_density": "Density B - Scattered fibroglandular densities.",
            "findings": "Mass in left CC view",
            "BI-RADS": "BI-RADS 4 - Suspicious abnormality. Biopsy needed.",
            "suspicion": "suspicious",
        }
    ),
    '```json\n{"breast_density": "ACR C", "findings": "Healthy Breast. No Findings",'
    ' "BI-RADS": "1", "suspicion": "healthy"}\n```',
    "Here is my impression: the tissue is heterogeneously dense (ACR C), "
    "with no mass; suspicious calcification in the right MLO view.",
    "I am unable to interpret this image.",
]

for raw in ANSWERS:
    report = parsing.parse(raw)
    print(f"{report.status.value:14s} birads={report.birads_class} density={report.density_class} "
          f"suspicion={report.suspicion}")
print()

flags = parsing.extract_flags("no mass; suspicious calcification in left CC")
print(f"negation-aware flags: {flags}\n")

# the unparsed bucket scores as wrong instead of vanishing
cm = metrics.ConfusionMatrix((1, 2, 3, 4, 5))
cm.update(4, 4)
cm.update(2, 3)
cm.update(5, None)  # a parse failure
scores = metrics.compute(cm)
print(f"cases={cm.total} unparsed={cm.total_unparsed} "
      f"accuracy={scores.micro_accuracy:.4f} macro_f1={scores.macro_f1:.4f}\n")

triple = metrics.rouge_l("the cat sat", "the cat")
print(f"rouge_l('the cat sat', 'the cat') -> precision {triple.precision:.4f} "
      f"recall {triple.recall:.4f} f {triple.f:.4f}")
bert = metrics.bert_score(
    "Mass in left CC view", "Mass in right CC view", metrics.HashTrigramEmbedder()
)
print(f"bert_score(left vs right view)   -> f {bert.f:.4f}")
