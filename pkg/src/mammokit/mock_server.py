"""In-repo mock of the generation server and embedding provider.

Implements POST /api/generate, GET /api/tags, GET /api/version, and
POST /embed. Generation replies are a deterministic function of the
request (a canned report drawn from a bank by content hash), so full runs
against the mock are reproducible byte for byte. Tests can inject a
`script` hook to fake failures, slow responses, or fixed replies.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

DEFAULT_MODELS = ("mock-vlm",)
DEFAULT_EMBED_DIM = 64
DEFAULT_PROVIDER_ID = "mock-embed"

# Bank of canned model outputs spanning the parse outcomes the pipeline
# must handle: clean schema JSON for each category, a fenced answer, a
# prose-wrapped answer, and a partial one.
DEFAULT_RESPONSE_BANK = (
    json.dumps(
        {
            "breast_density": "Density B - Scattered fibroglandular densities.",
            "findings": "Healthy Breast. No Findings",
            "BI-RADS": "BI-RADS 1 - Negative. Healthy Breast.",
            "suspicion": "healthy",
        },
        indent=2,
    ),
    json.dumps(
        {
            "breast_density": "Density C - Heterogeneously Dense.",
            "findings": "Healthy Breast. No Findings",
            "BI-RADS": "BI-RADS 2 - Benign (non-cancerous) finding",
            "suspicion": "benign",
        },
        indent=2,
    ),
    "```json\n"
    + json.dumps(
        {
            "breast_density": "Density A - Almost entirely fatty.",
            "findings": "Focal Asymmetry in left MLO view",
            "BI-RADS": "BI-RADS 3 - Probably benign. Short-term follow-up recommended.",
            "suspicion": "benign",
        },
        indent=2,
    )
    + "\n```",
    "Here is the structured report:\n"
    + json.dumps(
        {
            "breast_density": "Density C - Heterogeneously Dense.",
            "findings": "Mass in right CC view; Suspicious Calcification in right MLO view",
            "BI-RADS": "BI-RADS 4 - Suspicious abnormality. Biopsy needed.",
            "suspicion": "suspicious",
        },
        indent=2,
    )
    + "\nI hope this helps.",
    json.dumps(
        {
            "breast_density": "Density D - Extremely Dense.",
            "findings": "Mass in left CC view; Mass in left MLO view",
            "BI-RADS": "BI-RADS 5 - Highly suggestive of malignancy. High probability of cancer.",
            "suspicion": "suspicious",
        },
        indent=2,
    ),
    "The tissue appears heterogeneously dense (ACR C) but I cannot commit to a category.",
)


def deterministic_embedding(kind: str, data: str, dim: int) -> list[float]:
    """Unit vector derived from the payload hash; equal payloads embed equally."""
    digest = hashlib.sha256(f"{kind}:{data}".encode()).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return [round(float(x), 9) for x in vec]


class MockVLMServer:
    """Threaded mock server; use as a context manager in tests.

    `script(method, path, body) -> (status, payload) | None` intercepts
    requests before default handling. `latency_s` delays every response.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        models: tuple[str, ...] = DEFAULT_MODELS,
        embed_dim: int = DEFAULT_EMBED_DIM,
        provider_id: str = DEFAULT_PROVIDER_ID,
        response_bank: tuple[str, ...] = DEFAULT_RESPONSE_BANK,
        script=None,
        latency_s: float = 0.0,
    ):
        self.models = tuple(models)
        self.embed_dim = embed_dim
        self.provider_id = provider_id
        self.response_bank = tuple(response_bank)
        self.script = script
        self.latency_s = latency_s
        self.request_log: list[tuple[str, str]] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # keep test output quiet
                pass

            def _reply(self, status: int, payload: dict) -> None:
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def _dispatch(self, method: str) -> None:
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length).decode("utf-8") if length else ""
                outer.request_log.append((f"{method} {self.path}", body))
                if outer.latency_s:
                    time.sleep(outer.latency_s)
                if outer.script is not None:
                    scripted = outer.script(method, self.path, body)
                    if scripted is not None:
                        self._reply(*scripted)
                        return
                self._reply(*outer.handle(method, self.path, body))

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    def handle(self, method: str, path: str, body: str) -> tuple[int, dict]:
        if method == "GET" and path == "/api/version":
            return 200, {"version": "0.0.0-mock"}
        if method == "GET" and path == "/api/tags":
            return 200, {"models": [{"name": m} for m in self.models]}
        if method == "POST" and path == "/api/generate":
            try:
                req = json.loads(body)
            except ValueError:
                return 400, {"error": "bad json"}
            model = req.get("model", "")
            if model not in self.models:
                return 404, {"error": f"model '{model}' not found"}
            key = hashlib.sha256(
                (req.get("prompt", "") + "".join(req.get("images", []))).encode()
            ).digest()
            text = self.response_bank[int.from_bytes(key[:4], "little") % len(self.response_bank)]
            return 200, {"model": model, "response": text, "done": True, "eval_count": len(text.split())}
        if method == "POST" and path == "/embed":
            try:
                req = json.loads(body)
                kind, data = req["kind"], req["data"]
            except (ValueError, KeyError):
                return 400, {"error": "bad embed request"}
            vector = deterministic_embedding(kind, data, self.embed_dim)
            return 200, {"vector": vector, "dim": self.embed_dim, "provider_id": self.provider_id}
        return 404, {"error": f"no route {method} {path}"}

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockVLMServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self) -> "MockVLMServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
