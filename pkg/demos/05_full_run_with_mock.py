"""The whole loop against the in-repo mock server.

Starts the mock, runs zero-shot and RAG experiments over a synthetic
cohort, scores both, and prints the best-per-metric comparison. With
timing disabled the results files are byte-reproducible.
"""

import tempfile
from pathlib import Path

from synthdata import make_cohort

from mammokit import runner
from mammokit.config import ExperimentConfig
from mammokit.metrics import render_markdown
from mammokit.mock_server import MockVLMServer

workdir = Path(tempfile.mkdtemp(prefix="mammokit_demo_"))
csv_path = make_cohort(workdir, n_patients=30, seed=11)

with MockVLMServer() as server:
    print(f"mock server at {server.url}")
    base = ExperimentConfig(
        dataset_kind="vindr",
        metadata_path=str(csv_path),
        image_root=str(workdir),
        model_name="mock-vlm",
        endpoint=server.url,
        prompt_mode="zero_shot",
        run_id="demo_base",
        output_dir=str(workdir / "runs"),
        timing=False,
        target_side=32,
    )
    base_results = runner.run(base)
    print(f"zero-shot run: {len(base_results.read_text().splitlines()) - 1} cases -> {base_results}")

    rag = ExperimentConfig(**{
        **base.as_dict(),
        "run_id": "demo_rag",
        "prompt_mode": "rag_few_shot",
        "rag_enabled": True,
        "rag_index_path": str(workdir / "index.mwix"),
        "embed_endpoint": server.url,
        "embed_provider_id": "mock-embed",
        "embed_dimension": 64,
    })
    runner.build_index(rag)
    rag_results = runner.run(rag)
    print(f"rag run:       {len(rag_results.read_text().splitlines()) - 1} cases -> {rag_results}")

    report = runner.evaluate(base_results)
    print(f"\nzero-shot tables at {report.csv_path}")
    print("\n".join(report.csv_path.read_text().splitlines()[:9]))

    rows = runner.compare([base_results, rag_results])
    print("\nbest per (task, metric) across the two runs:")
    print(render_markdown(rows[:10], runner.COMPARE_HEADER))
