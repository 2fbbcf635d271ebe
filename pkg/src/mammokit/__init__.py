"""mammokit: local harness for structured mammogram reporting with
Ollama-hosted vision-language models.

Subpackages group by pipeline stage: dataset ingestion and reference
reports (ingest), pixel work (imaging), prompt rendering (prompts),
retrieval (vector_store), HTTP clients (client) and their in-repo mock
(mock_server), output parsing (parsing), metrics (metrics), and the run
loop plus CLI (runner, cli).
"""

__version__ = "0.1.0"
