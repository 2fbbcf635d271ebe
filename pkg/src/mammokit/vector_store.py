"""Flat cosine-similarity index over train-split exemplar embeddings.

At the few-thousand-record scale an exact scan is faster to build, trivial
to test against a brute-force oracle, and has none of the recall caveats
of approximate structures. The index refuses test-split records so
retrieval can never leak evaluation patients into prompts.

File format (little-endian throughout):

    magic "MWIX1"
    u32 manifest length, manifest JSON (dimension, count, metric, ...)
    per record: u16 record_id length + UTF-8, u16 patient_id length + UTF-8,
                dimension x f32 vector
    u32 CRC32 of everything after the magic

Report payloads and image refs live in a sidecar JSONL next to the index,
keyed by record_id.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import SplitAssignment

MAGIC_PREFIX = b"MWIX"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + str(FORMAT_VERSION).encode()


class VectorStoreError(Exception):
    pass


class DimensionMismatch(VectorStoreError):
    def __init__(self, actual: int, expected: int):
        super().__init__(f"vector has dimension {actual}, expected {expected}")
        self.actual = actual
        self.expected = expected


class ZeroVector(VectorStoreError):
    pass


class LeakageDetected(VectorStoreError):
    def __init__(self, patient_id: str):
        super().__init__(f"patient {patient_id} is in the test split; refusing to index")
        self.patient_id = patient_id


class MembershipMissing(VectorStoreError):
    pass


class EmptyIndex(VectorStoreError):
    pass


class CorruptIndex(VectorStoreError):
    pass


class VersionMismatch(VectorStoreError):
    pass


def cosine(a, b) -> float:
    """Cosine similarity, computed in float64."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape or va.ndim != 1:
        raise DimensionMismatch(vb.size, va.size)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine undefined for zero-norm vectors")
    return float(np.dot(va, vb) / (na * nb))


@dataclass(frozen=True)
class EmbeddingRecord:
    record_id: str
    patient_id: str
    vector: np.ndarray  # stored as float32
    report_payload: str
    image_ref: str = ""

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1 or vec.size == 0:
            raise ValueError(f"record {self.record_id}: vector must be 1-D and non-empty")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"record {self.record_id}: vector has non-finite entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


@dataclass
class IndexManifest:
    dimension: int
    count: int
    provider_id: str = ""
    build_seed: int = 0
    metric: str = "cosine"
    source_split: str = "train"
    format_version: int = FORMAT_VERSION
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "count": self.count,
            "provider_id": self.provider_id,
            "build_seed": self.build_seed,
            "metric": self.metric,
            "source_split": self.source_split,
            "format_version": self.format_version,
            "warnings": self.warnings,
        }


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 5
    min_similarity: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


class FlatIndex:
    """Immutable after build; concurrent queries are safe."""

    def __init__(self, records: list[EmbeddingRecord], manifest: IndexManifest):
        self._records = list(records)
        self.manifest = manifest
        if self._records:
            self._matrix = np.stack([r.vector for r in self._records]).astype(np.float64)
            self._norms = np.linalg.norm(self._matrix, axis=1)
        else:
            self._matrix = np.zeros((0, manifest.dimension), dtype=np.float64)
            self._norms = np.zeros(0)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[EmbeddingRecord]:
        return list(self._records)

    @property
    def patient_ids(self) -> set[str]:
        return {r.patient_id for r in self._records}

    @classmethod
    def build(
        cls,
        records: list[EmbeddingRecord],
        split: SplitAssignment,
        provider_id: str = "",
        build_seed: int = 0,
        allow_test_filter: bool = False,
    ) -> "FlatIndex":
        """Build from train-split records only.

        A record whose patient is in the test split raises LeakageDetected
        unless ``allow_test_filter`` is set, in which case it is dropped.
        Either way the index holds exactly the train-membership records.
        """
        kept: list[EmbeddingRecord] = []
        for record in records:
            bucket = split.membership.get(record.patient_id)
            if bucket is None:
                raise MembershipMissing(f"patient {record.patient_id} has no split membership")
            if bucket == "test":
                if not allow_test_filter:
                    raise LeakageDetected(record.patient_id)
                continue
            kept.append(record)
        kept.sort(key=lambda r: r.record_id)
        dims = {r.vector.size for r in kept}
        if len(dims) > 1:
            raise DimensionMismatch(max(dims), min(dims))
        dimension = dims.pop() if dims else 0
        warnings = [] if kept else ["index built with an empty train set"]
        manifest = IndexManifest(
            dimension=dimension,
            count=len(kept),
            provider_id=provider_id,
            build_seed=build_seed,
            warnings=warnings,
        )
        return cls(kept, manifest)

    def top_k(self, query, cfg: RetrievalConfig = RetrievalConfig()) -> list[tuple[EmbeddingRecord, float]]:
        """The k most similar records, sorted by descending similarity with
        ties broken by ascending record_id."""
        if not self._records:
            raise EmptyIndex("cannot query an empty index")
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1 or q.size != self.manifest.dimension:
            raise DimensionMismatch(q.size, self.manifest.dimension)
        qnorm = float(np.linalg.norm(q))
        if qnorm == 0.0:
            raise ZeroVector("cosine undefined for zero-norm query")
        sims = (self._matrix @ q) / (self._norms * qnorm)
        order = sorted(range(len(self._records)), key=lambda i: (-sims[i], self._records[i].record_id))
        out = []
        for i in order[: cfg.k]:
            sim = float(sims[i])
            if cfg.min_similarity is not None and sim < cfg.min_similarity:
                break
            out.append((self._records[i], sim))
        return out

    def persist(self, path: str | Path) -> None:
        path = Path(path)
        body = bytearray()
        manifest_json = json.dumps(self.manifest.as_dict(), sort_keys=True).encode("utf-8")
        body += struct.pack("<I", len(manifest_json))
        body += manifest_json
        for record in self._records:
            rid = record.record_id.encode("utf-8")
            pid = record.patient_id.encode("utf-8")
            body += struct.pack("<H", len(rid)) + rid
            body += struct.pack("<H", len(pid)) + pid
            body += record.vector.astype("<f4").tobytes()
        checksum = zlib.crc32(bytes(body)) & 0xFFFFFFFF
        path.write_bytes(MAGIC + bytes(body) + struct.pack("<I", checksum))
        with sidecar_path(path).open("w", encoding="utf-8") as fh:
            for record in self._records:
                fh.write(
                    json.dumps(
                        {
                            "record_id": record.record_id,
                            "report_payload": record.report_payload,
                            "image_ref": record.image_ref,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "FlatIndex":
        path = Path(path)
        blob = path.read_bytes()
        if len(blob) < len(MAGIC) + 8:
            raise CorruptIndex(f"{path}: file too short")
        magic, rest = blob[: len(MAGIC)], blob[len(MAGIC):]
        if magic != MAGIC:
            if magic[: len(MAGIC_PREFIX)] == MAGIC_PREFIX:
                raise VersionMismatch(f"{path}: format {magic[len(MAGIC_PREFIX):]!r} not supported")
            raise CorruptIndex(f"{path}: bad magic {magic!r}")
        body, (stored_crc,) = rest[:-4], struct.unpack("<I", rest[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
            raise CorruptIndex(f"{path}: checksum mismatch")
        try:
            manifest, records = cls._decode_body(body)
        except (struct.error, ValueError, IndexError) as exc:
            raise CorruptIndex(f"{path}: {exc}") from exc
        if manifest.format_version != FORMAT_VERSION:
            raise VersionMismatch(f"{path}: manifest format_version {manifest.format_version}")
        payloads = _load_sidecar(sidecar_path(path))
        full = []
        for record_id, patient_id, vector in records:
            if record_id not in payloads:
                raise CorruptIndex(f"{path}: record {record_id} missing from payload sidecar")
            payload = payloads[record_id]
            full.append(
                EmbeddingRecord(
                    record_id=record_id,
                    patient_id=patient_id,
                    vector=vector,
                    report_payload=payload["report_payload"],
                    image_ref=payload.get("image_ref", ""),
                )
            )
        return cls(full, manifest)

    @staticmethod
    def _decode_body(body: bytes) -> tuple[IndexManifest, list[tuple[str, str, np.ndarray]]]:
        offset = 0
        (mlen,) = struct.unpack_from("<I", body, offset)
        offset += 4
        manifest_dict = json.loads(body[offset:offset + mlen].decode("utf-8"))
        offset += mlen
        manifest = IndexManifest(**manifest_dict)
        records = []
        for _ in range(manifest.count):
            (rlen,) = struct.unpack_from("<H", body, offset)
            offset += 2
            record_id = body[offset:offset + rlen].decode("utf-8")
            offset += rlen
            (plen,) = struct.unpack_from("<H", body, offset)
            offset += 2
            patient_id = body[offset:offset + plen].decode("utf-8")
            offset += plen
            nbytes = manifest.dimension * 4
            chunk = body[offset:offset + nbytes]
            if len(chunk) != nbytes:
                raise ValueError("vector block truncated")
            vector = np.frombuffer(chunk, dtype="<f4")
            offset += nbytes
            records.append((record_id, patient_id, vector))
        if offset != len(body):
            raise ValueError(f"{len(body) - offset} trailing bytes after last record")
        return manifest, records


def sidecar_path(index_path: str | Path) -> Path:
    index_path = Path(index_path)
    return index_path.with_name(index_path.name + ".payloads.jsonl")


def _load_sidecar(path: Path) -> dict[str, dict]:
    if not path.exists():
        raise CorruptIndex(f"payload sidecar missing: {path}")
    payloads = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            payloads[obj["record_id"]] = obj
    return payloads
