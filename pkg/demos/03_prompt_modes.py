"""The four prompting regimes and the template digests that pin them.

Zero-shot and CoT take only the query image; few-shot inserts the five
fixed exemplars; RAG inserts retrieved exemplars in similarity order.
Templates are text assets, and each run records the digest of the
template in force.
"""

from mammokit.prompts import TemplateLibrary, load_fixed_exemplars

library = TemplateLibrary()
query = b"png-bytes-of-the-composite"

for mode in ("zero_shot", "few_shot", "cot"):
    print(f"{mode:12s} digest {library.digest(mode)[:16]}")
print(f"{'rag_few_shot':12s} digest {library.digest('rag_few_shot')[:16]} (reuses the few-shot body)")

zero = library.render("zero_shot", query)
print(f"\nzero-shot prompt: {len(zero.text)} chars, {len(zero.attachments)} attachment(s)")
print(zero.text[:300] + " ...\n")

exemplars = load_fixed_exemplars()
few = library.render("few_shot", query, exemplars)
print(f"few-shot prompt inserts {few.text.count('Example ')} examples: ids {list(few.exemplar_ids)}")

cot = library.render("cot", query)
cues = [cot.text.index(h) for h in ("Step 1", "Step 2", "Step 3", "Step 4", "Step 5")]
print(f"CoT step cues appear in order: {cues == sorted(cues)}")

rag = library.render_rag(query, exemplars[:3])
print(f"RAG prompt with 3 retrieved exemplars keeps retrieval order: {list(rag.exemplar_ids)}")
