"""End-to-end run loop: preflight, per-case generation, resumable JSONL
results, table emission, and cross-run comparison.

A results file starts with one provenance line (config snapshot plus
template/imaging digests) followed by one line per case, appended and
flushed as each case completes. Re-running the same config skips case ids
already present, so a killed run resumes where it stopped; a different
config under the same run id is refused.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import imaging, ingest, metrics, parsing
from .client import (
    ClientError,
    EmbeddingProvider,
    EmbeddingProviderConfig,
    GenerationOptions,
    GenerationRequest,
    OllamaClient,
    encode_image,
    health_check,
)
from .config import ExperimentConfig
from .imaging import ImagingConfig, RasterImage
from .prompts import Exemplar, PromptMode, TemplateLibrary, load_fixed_exemplars, mode_from_string
from .vector_store import FlatIndex, RetrievalConfig, VectorStoreError

logger = logging.getLogger(__name__)

RESULTS_FORMAT = "results-v1"
EPOCH_TIMESTAMP = "1970-01-01T00:00:00+00:00"

RESULT_KEYS = (
    "kind", "run_id", "case_id", "prompt_mode", "exemplar_ids", "raw_output",
    "parsed", "gold", "latency_ms", "template_digest", "timestamp", "error",
)
GOLD_KEYS = ("image_id", "breast_density", "BI-RADS", "findings", "suspicion",
             "birads_class", "density_class", "flags")

# Invocation limits, not experiment identity: a run may be resumed under
# different values of these, and they stay out of the provenance snapshot.
VOLATILE_CONFIG_KEYS = ("max_cases", "concurrency", "timeout_s", "output_dir")


def provenance_config(config: ExperimentConfig) -> dict:
    return {k: v for k, v in config.as_dict().items() if k not in VOLATILE_CONFIG_KEYS}


class RunnerError(Exception):
    pass


class PreflightFailure(RunnerError):
    def __init__(self, kind: str, detail: str):
        super().__init__(f"preflight failed ({kind}): {detail}")
        self.failure_kind = kind


class RunConfigMismatch(RunnerError):
    pass


class CorruptResults(RunnerError):
    def __init__(self, line_no: int, detail: str):
        super().__init__(f"results line {line_no}: {detail}")
        self.line_no = line_no


class SplitMismatch(RunnerError):
    pass


@dataclass(frozen=True)
class RunCase:
    case_id: str
    gold: ingest.GroundTruthReport
    image_paths: tuple[str, ...]  # four views, or one image for single-view datasets


def load_cases(
    config: ExperimentConfig, bucket: str = "test"
) -> tuple[list[RunCase], ingest.SplitAssignment]:
    """Cases from the configured dataset in one split bucket ("train",
    "test", or "all"), sorted by case id."""
    if config.dataset_kind == "vindr":
        records, bad = ingest.load_vindr_metadata(config.metadata_path, strict=False)
        if bad:
            logger.warning("%d metadata rows had bad label values and were reported", len(bad))
        studies, problems = ingest.assemble_studies(records)
        if problems:
            logger.warning("%d patients had incomplete or duplicated views", len(problems))
        assignment = ingest.split(
            [s.patient_id for s in studies], "patient", config.split_ratio, config.split_seed
        )
        cases = [
            RunCase(
                case_id=s.patient_id,
                gold=ingest.synthesize_report(s),
                image_paths=tuple(_resolve(v.image_ref, config.image_root) for v in s.ordered_views()),
            )
            for s in studies
        ]
    else:
        pairs, problems = ingest.load_dmid(config.dmid_dir, strict=False)
        if problems:
            logger.warning("%d dmid files failed pairing or extraction", len(problems))
        assignment = ingest.split(
            [Path(image).stem for image, _ in pairs], "image", config.split_ratio, config.split_seed
        )
        cases = [
            RunCase(case_id=Path(image).stem, gold=report, image_paths=(image,))
            for image, report in pairs
        ]
    if bucket != "all":
        wanted = set(assignment.ids(bucket))
        cases = [c for c in cases if c.case_id in wanted]
    cases.sort(key=lambda c: c.case_id)
    return cases, assignment


def _resolve(ref: str, root: str) -> str:
    path = Path(ref)
    if root and not path.is_absolute():
        return str(Path(root) / path)
    return str(path)


def build_composite(case: RunCase, imaging_cfg: ImagingConfig, cache_dir: Path | None) -> bytes:
    """PNG bytes of the model input image, cached by (case, imaging digest)."""
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        cached = cache_dir / f"{case.case_id}_{imaging_cfg.digest()}.png"
        if cached.exists():
            return cached.read_bytes()
    if len(case.image_paths) == 4:
        tiles = [imaging.resize_square(RasterImage.load(p), imaging_cfg) for p in case.image_paths]
        image = imaging.compose_four_view(*tiles, imaging_cfg)
    else:
        image = imaging.resize_square(RasterImage.load(case.image_paths[0]), imaging_cfg)
    data = image.png_bytes()
    if cache_dir is not None:
        cached.write_bytes(data)
    return data


class _RagRetriever:
    def __init__(self, config: ExperimentConfig, provider: EmbeddingProvider, library: TemplateLibrary):
        self.index = FlatIndex.load(config.rag_index_path)
        self.provider = provider
        self.k = config.rag_k
        self.fuse_text = config.rag_fuse_text
        self.attach_images = config.attach_exemplar_images
        # The instruction core embedded alongside the image when fusing text.
        self.instruction = library.template(PromptMode.ZERO_SHOT).body

    def retrieve(self, image_png: bytes) -> list[Exemplar]:
        query = self.provider.embed_image(image_png).astype("float64")
        if self.fuse_text:
            text_vec = self.provider.embed_text(self.instruction).astype("float64")
            query = (query + text_vec) / 2.0
        hits = self.index.top_k(query, RetrievalConfig(k=self.k))
        exemplars = []
        for record, _sim in hits:
            image_bytes = None
            if self.attach_images and record.image_ref and Path(record.image_ref).exists():
                image_bytes = Path(record.image_ref).read_bytes()
            exemplars.append(
                Exemplar(
                    image_id=record.record_id,
                    report_json=record.report_payload,
                    image_ref=record.image_ref or None,
                    image_bytes=image_bytes,
                )
            )
        return exemplars


def run(
    config: ExperimentConfig,
    client: OllamaClient | None = None,
    provider: EmbeddingProvider | None = None,
) -> Path:
    """Execute the experiment; returns the results file path."""
    mode = mode_from_string(config.prompt_mode)
    library = TemplateLibrary(
        template_dir=config.template_dir or None,
        single_view=config.dataset_kind == "dmid",
    )
    imaging_cfg = ImagingConfig(target_side=config.target_side)

    try:
        info = health_check(config.endpoint)
    except ClientError as exc:
        raise PreflightFailure("server_unreachable", str(exc)) from exc
    if config.model_name not in info.models:
        logger.warning("model %r not advertised by server (has: %s)", config.model_name, list(info.models))

    try:
        cases, assignment = load_cases(config)
    except (ingest.IngestError, OSError) as exc:
        raise PreflightFailure("dataset", str(exc)) from exc

    retriever = None
    if mode is PromptMode.RAG_FEW_SHOT:
        if not config.rag_enabled:
            raise PreflightFailure("rag_disabled", "prompt_mode rag_few_shot requires rag_enabled")
        if not Path(config.rag_index_path).exists():
            raise PreflightFailure("index_missing", config.rag_index_path)
        if provider is None:
            if not config.embed_endpoint:
                raise PreflightFailure("provider_missing", "embed_endpoint not configured")
            provider = EmbeddingProvider(
                EmbeddingProviderConfig(
                    endpoint=config.embed_endpoint,
                    provider_id=config.embed_provider_id,
                    dimension=config.embed_dimension,
                )
            )
        try:
            retriever = _RagRetriever(config, provider, library)
        except VectorStoreError as exc:
            raise PreflightFailure("index_corrupt", str(exc)) from exc

    if client is None:
        client = OllamaClient(config.endpoint, timeout_s=config.timeout_s, concurrency=config.concurrency)

    fixed_exemplars = None
    if mode is PromptMode.FEW_SHOT:
        fixed_exemplars = load_fixed_exemplars(config.exemplars_path or None)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / f"{config.run_id}.jsonl"
    cache_dir = out_dir / "composites"
    digest = library.digest(mode)
    provenance = {
        "kind": "provenance",
        "format": RESULTS_FORMAT,
        "run_id": config.run_id,
        "config": provenance_config(config),
        "generation_options": {"temperature": 0},
        "template_digest": digest,
        "imaging_digest": imaging_cfg.digest(),
    }
    done = _prepare_results_file(results_path, provenance)

    pending = [c for c in cases if c.case_id not in done]
    if config.max_cases:
        already = len(done)
        pending = pending[: max(0, config.max_cases - already)]
    if config.concurrency > 1:
        logger.warning("concurrency %d: server-side queuing may reorder latencies", config.concurrency)

    def process(case: RunCase) -> dict:
        return _run_case(case, config, mode, library, imaging_cfg, cache_dir, client,
                         retriever, fixed_exemplars, digest)

    with results_path.open("a", encoding="utf-8") as fh:
        if config.concurrency == 1:
            produced = map(process, pending)
        else:
            executor = ThreadPoolExecutor(max_workers=config.concurrency)
            produced = executor.map(process, pending)
        for record in produced:
            fh.write(json.dumps(record) + "\n")
            fh.flush()
        if config.concurrency > 1:
            executor.shutdown()
    return results_path


def _prepare_results_file(path: Path, provenance: dict) -> set[str]:
    """Create or validate the results file; returns completed case ids.

    A partial trailing line (the footprint of a killed mid-write process)
    is dropped so the interrupted case is redone; a bad line anywhere else
    is corruption and refuses the resume.
    """
    if not path.exists() or path.stat().st_size == 0:
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps(provenance) + "\n")
        return set()
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    try:
        stored = json.loads(lines[0])
    except ValueError as exc:
        raise CorruptResults(1, f"provenance line unreadable: {exc}") from exc
    if stored.get("kind") != "provenance":
        raise CorruptResults(1, "first line is not a provenance record")
    for key in ("config", "template_digest", "imaging_digest"):
        if stored.get(key) != provenance[key]:
            raise RunConfigMismatch(
                f"results file {path} was produced under a different {key}; "
                "refusing to resume into it"
            )
    done = set()
    kept = len(lines)
    for index, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError as exc:
            if index == len(lines) - 1:
                logger.warning("dropping partial trailing line %d in %s", index + 1, path)
                kept = index
                break
            raise CorruptResults(index + 1, str(exc)) from exc
        if record.get("kind") == "result":
            done.add(record["case_id"])
    if kept < len(lines) or not text.endswith("\n"):
        path.write_text("\n".join(lines[:kept]) + "\n", encoding="utf-8")
    return done


def _run_case(
    case: RunCase,
    config: ExperimentConfig,
    mode: PromptMode,
    library: TemplateLibrary,
    imaging_cfg: ImagingConfig,
    cache_dir: Path,
    client: OllamaClient,
    retriever: _RagRetriever | None,
    fixed_exemplars: list[Exemplar] | None,
    template_digest: str,
) -> dict:
    image_png = build_composite(case, imaging_cfg, cache_dir)
    if mode is PromptMode.RAG_FEW_SHOT:
        exemplars = retriever.retrieve(image_png)
        rendered = library.render_rag(image_png, exemplars, config.attach_exemplar_images)
    elif mode is PromptMode.FEW_SHOT:
        rendered = library.render(mode, image_png, fixed_exemplars, config.attach_exemplar_images)
    else:
        rendered = library.render(mode, image_png)
    request = GenerationRequest(
        model_name=config.model_name,
        prompt_text=rendered.text,
        images=tuple(encode_image(a) for a in rendered.attachments),
        options=GenerationOptions(temperature=0.0),
    )
    error = None
    raw = ""
    latency_ms = 0.0
    try:
        response = client.generate(request)
        raw = response.text
        latency_ms = response.latency_ms
    except ClientError as exc:
        error = {"kind": exc.kind, "detail": str(exc)}
        logger.warning("case %s failed: %s", case.case_id, exc)
    parsed = parsing.parse(raw)
    return {
        "kind": "result",
        "run_id": config.run_id,
        "case_id": case.case_id,
        "prompt_mode": mode.value,
        "exemplar_ids": list(rendered.exemplar_ids),
        "raw_output": raw,
        "parsed": parsed.as_dict(),
        "gold": case.gold.as_dict(image_id=case.case_id),
        "latency_ms": round(latency_ms, 3) if config.timing else 0.0,
        "template_digest": template_digest,
        "timestamp": datetime.now(timezone.utc).isoformat() if config.timing else EPOCH_TIMESTAMP,
        "error": error,
    }


def read_results(path: str | Path) -> tuple[dict, list[dict]]:
    """Parse a results file into (provenance, records); validates line shape."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorruptResults(1, "empty results file")
    try:
        provenance = json.loads(lines[0])
    except ValueError as exc:
        raise CorruptResults(1, str(exc)) from exc
    if provenance.get("kind") != "provenance":
        raise CorruptResults(1, "first line is not a provenance record")
    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError as exc:
            raise CorruptResults(line_no, str(exc)) from exc
        if record.get("kind") != "result":
            raise CorruptResults(line_no, f"unexpected record kind {record.get('kind')!r}")
        records.append(record)
    return provenance, records


def validate_results(path: str | Path) -> list[str]:
    """Schema check for a results file; returns human-readable problems."""
    problems = []
    try:
        provenance, records = read_results(path)
    except (CorruptResults, OSError) as exc:
        return [str(exc)]
    for key in ("run_id", "config", "template_digest"):
        if key not in provenance:
            problems.append(f"provenance missing key {key!r}")
    for i, record in enumerate(records, start=2):
        missing = [k for k in RESULT_KEYS if k not in record]
        if missing:
            problems.append(f"line {i}: missing keys {missing}")
            continue
        gold_missing = [k for k in GOLD_KEYS if k not in record["gold"]]
        if gold_missing:
            problems.append(f"line {i}: gold missing keys {gold_missing}")
        status = record["parsed"].get("status")
        if status not in {s.value for s in parsing.ParseStatus}:
            problems.append(f"line {i}: bad parse status {status!r}")
    return problems


@dataclass
class EvalReport:
    results: list[metrics.TaskResult]
    csv_path: Path
    md_path: Path
    json_path: Path
    n_records: int
    warning: str | None = None


TABLE_HEADER = ("Task", "Metric", "Value", "Prompt", "Model")


def evaluate(results_path: str | Path, out_dir: str | Path | None = None, token_embedder=None) -> EvalReport:
    """Score one results file and write the metric tables next to it.

    Pure function of the file contents: re-running does not change outputs.
    """
    results_path = Path(results_path)
    provenance, records = read_results(results_path)
    out_dir = Path(out_dir) if out_dir else results_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = results_path.stem
    csv_path = out_dir / f"{stem}_metrics.csv"
    md_path = out_dir / f"{stem}_metrics.md"
    json_path = out_dir / f"{stem}_metrics.json"

    cfg = provenance.get("config", {})
    prompt = cfg.get("prompt_mode", "?")
    model = cfg.get("model_name", "?")
    warning = None
    if records:
        task_results = metrics.aggregate(records, token_embedder=token_embedder)
        rows = metrics.table_rows(task_results, prompt=prompt, model=model)
    else:
        task_results = []
        rows = []
        warning = "results file contains no result records; tables are empty"
        logger.warning(warning)
    csv_path.write_text(metrics.render_csv(rows, TABLE_HEADER), encoding="utf-8")
    md_path.write_text(metrics.render_markdown(rows, TABLE_HEADER), encoding="utf-8")
    json_path.write_text(metrics.results_to_json(task_results), encoding="utf-8")
    return EvalReport(
        results=task_results,
        csv_path=csv_path,
        md_path=md_path,
        json_path=json_path,
        n_records=len(records),
        warning=warning,
    )


COMPARE_HEADER = ("Task", "Metric", "Best Value", "Prompt", "Model", "RAG", "Run", "Tie")

# Metrics eligible for best-of selection, per task heading.
_COMPARE_METRICS = ("Accuracy", "Precision", "Recall", "F1-score", "Specificity", "BERTScore", "ROUGE-L")


def compare(paths: list[str | Path], token_embedder=None) -> list[tuple]:
    """Best value per (task, metric) across runs over the same dataset split.

    Ties go to the earliest run id and are marked in the Tie column.
    """
    if len(paths) < 2:
        raise ValueError("compare needs at least two results files")
    runs = []
    split_keys = set()
    for path in paths:
        provenance, records = read_results(path)
        cfg = provenance.get("config", {})
        split_keys.add((cfg.get("dataset_kind"), cfg.get("split_ratio"), cfg.get("split_seed")))
        task_results = metrics.aggregate(records, token_embedder=token_embedder)
        rows = metrics.table_rows(task_results, prompt=cfg.get("prompt_mode", "?"), model=cfg.get("model_name", "?"))
        values = {(task, metric): float(value) for task, metric, value, _, _ in rows if metric != "Unparsed"}
        rag = bool(cfg.get("rag_enabled")) or cfg.get("prompt_mode") == "rag_few_shot"
        runs.append(
            {
                "run_id": provenance.get("run_id", str(path)),
                "prompt": cfg.get("prompt_mode", "?"),
                "model": cfg.get("model_name", "?"),
                "rag": rag,
                "values": values,
            }
        )
    if len(split_keys) > 1:
        raise SplitMismatch(f"runs cover different dataset splits: {sorted(split_keys)}")

    keys = sorted({key for run in runs for key in run["values"]},
                  key=lambda k: (_task_order(k[0]), _COMPARE_METRICS.index(k[1])))
    out_rows = []
    for task, metric in keys:
        holders = [r for r in runs if (task, metric) in r["values"]]
        best_value = max(r["values"][(task, metric)] for r in holders)
        winners = sorted(
            (r for r in holders if r["values"][(task, metric)] == best_value),
            key=lambda r: r["run_id"],
        )
        best = winners[0]
        out_rows.append(
            (
                task,
                metric,
                f"{best_value:.4f}",
                best["prompt"],
                best["model"],
                "yes" if best["rag"] else "no",
                best["run_id"],
                "tie" if len(winners) > 1 else "",
            )
        )
    return out_rows


def _task_order(heading: str) -> int:
    order = ("BI-RADS", "Breast Density", "Findings", "Calcification", "Mass", "Asymmetry", "Suspicion")
    return order.index(heading) if heading in order else len(order)


def build_index(config: ExperimentConfig, provider: EmbeddingProvider | None = None) -> Path:
    """Embed train-split cases and persist the retrieval index."""
    if provider is None:
        if not config.embed_endpoint:
            raise PreflightFailure("provider_missing", "embed_endpoint not configured")
        provider = EmbeddingProvider(
            EmbeddingProviderConfig(
                endpoint=config.embed_endpoint,
                provider_id=config.embed_provider_id,
                dimension=config.embed_dimension,
            )
        )
    from .vector_store import EmbeddingRecord

    train_cases, assignment = load_cases(config, bucket="train")
    imaging_cfg = ImagingConfig(target_side=config.target_side)
    cache_dir = Path(config.output_dir) / "composites"
    records = []
    for case in train_cases:
        png = build_composite(case, imaging_cfg, cache_dir)
        vector = provider.embed_image(png)
        records.append(
            EmbeddingRecord(
                record_id=case.case_id,
                patient_id=case.case_id,
                vector=vector,
                report_payload=json.dumps(case.gold.schema_dict(case.case_id)),
                image_ref=str(case.image_paths[0]) if len(case.image_paths) == 1 else "",
            )
        )
    index = FlatIndex.build(records, assignment, provider_id=config.embed_provider_id)
    out = Path(config.rag_index_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.persist(out)
    return out
