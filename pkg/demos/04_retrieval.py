"""The flat cosine index behind RAG.

Embeddings here come from the mock provider (a deterministic hash of the
payload), which is enough to show the mechanics: train-only membership,
top-k by cosine with record-id tiebreaks, and the checksummed on-disk
format with its payload sidecar.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from mammokit.ingest import split
from mammokit.mock_server import deterministic_embedding
from mammokit.vector_store import EmbeddingRecord, FlatIndex, RetrievalConfig, sidecar_path

DIM = 64
patients = [f"patient{i:03d}" for i in range(40)]
assignment = split(patients, "patient", ratio=0.8, seed=17)
print(f"split: {len(assignment.train_ids)} train / {len(assignment.test_ids)} test")

records = [
    EmbeddingRecord(
        record_id=pid,
        patient_id=pid,
        vector=np.asarray(deterministic_embedding("image", pid, DIM), dtype=np.float32),
        report_payload=json.dumps({"image_id": pid, "BI-RADS": "BI-RADS 1 - Negative. Healthy Breast."}),
        image_ref=f"{pid}.png",
    )
    for pid in patients
]

# the build refuses test-split records unless filtering is explicit
try:
    FlatIndex.build(records, assignment)
except Exception as exc:
    print(f"guard: {type(exc).__name__}: {exc}")

index = FlatIndex.build(records, assignment, allow_test_filter=True)
print(f"index holds {len(index)} train records; "
      f"test leakage: {len(index.patient_ids & set(assignment.test_ids))} records")

query = np.asarray(deterministic_embedding("image", assignment.test_ids[0], DIM))
print(f"\ntop-5 neighbours of held-out {assignment.test_ids[0]}:")
for record, sim in index.top_k(query, RetrievalConfig(k=5)):
    print(f"  {record.record_id}  cosine {sim:+.4f}")

workdir = Path(tempfile.mkdtemp(prefix="mammokit_demo_"))
path = workdir / "index.mwix"
index.persist(path)
loaded = FlatIndex.load(path)
same = all(a.vector.tobytes() == b.vector.tobytes() for a, b in zip(index.records, loaded.records))
print(f"\npersisted to {path} ({path.stat().st_size} bytes + sidecar {sidecar_path(path).name})")
print(f"round trip bit-for-bit: {same}")
