"""HTTP clients for the generation server (Ollama-style API) and the
embedding provider.

Calls are non-streaming and retried only on connection and timeout
failures; HTTP error statuses are never retried. Request bodies are built
with a fixed field order so identical inputs serialize to identical bytes.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .vector_store import DimensionMismatch

DEFAULT_GENERATE_TIMEOUT_S = 120.0


class ClientError(Exception):
    kind = "client"

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConnectError(ClientError):
    kind = "connect"


class RequestTimeout(ClientError):
    kind = "timeout"


class HttpStatusError(ClientError):
    kind = "http_status"

    def __init__(self, status: int, detail: str):
        super().__init__(f"HTTP {status}: {detail}")
        self.status = status


class ModelNotFound(HttpStatusError):
    kind = "model_not_found"


class MalformedBody(ClientError):
    kind = "malformed_body"


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_s: float = 0.5

    def delay(self, attempt: int) -> float:
        # attempt is 1-based; delays are non-decreasing
        return self.base_backoff_s * attempt


@dataclass(frozen=True)
class GenerationOptions:
    temperature: float = 0.0
    seed: int | None = None
    max_tokens: int | None = None


@dataclass(frozen=True)
class GenerationRequest:
    model_name: str
    prompt_text: str
    images: tuple[str, ...] = ()  # base64-encoded payloads
    options: GenerationOptions = GenerationOptions()


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    model_name: str
    latency_ms: float
    token_counts: dict[str, int] | None = None


@dataclass(frozen=True)
class ServerInfo:
    version: str | None
    models: tuple[str, ...]


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    endpoint: str
    provider_id: str
    dimension: int
    timeout_ms: int = 30000
    retry: RetryPolicy = RetryPolicy()

    def __post_init__(self):
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")


def encode_image(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def request_body(req: GenerationRequest) -> str:
    """Canonical wire body for /api/generate; byte-stable for equal inputs."""
    options: dict = {"temperature": _plain_number(req.options.temperature)}
    if req.options.seed is not None:
        options["seed"] = req.options.seed
    if req.options.max_tokens is not None:
        options["num_predict"] = req.options.max_tokens
    body = {
        "model": req.model_name,
        "prompt": req.prompt_text,
        "images": list(req.images),
        "stream": False,
        "options": options,
    }
    return json.dumps(body)


def _plain_number(x: float):
    return int(x) if float(x).is_integer() else x


class OllamaClient:
    """Client for a local Ollama-compatible generation server.

    Thread-safe; a semaphore bounds in-flight requests to `concurrency`
    (default 1, sequential). `sleep` is injectable for tests.
    """

    def __init__(
        self,
        endpoint: str,
        timeout_s: float = DEFAULT_GENERATE_TIMEOUT_S,
        retry: RetryPolicy = RetryPolicy(),
        concurrency: int = 1,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self.retry = retry
        self._sleep = sleep
        self._semaphore = threading.Semaphore(concurrency)
        self._session = requests.Session()

    def generate(self, req: GenerationRequest) -> GenerationResponse:
        body = request_body(req)
        with self._semaphore:
            started = time.monotonic()
            raw = self._post_with_retries(
                f"{self.endpoint}/api/generate", body, timeout_s=self.timeout_s
            )
            latency_ms = (time.monotonic() - started) * 1000.0
        try:
            payload = json.loads(raw)
            text = payload["response"]
            if not isinstance(text, str):
                raise TypeError("response field is not a string")
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedBody(f"generation response body: {exc}") from exc
        token_counts = {
            k: payload[k] for k in ("prompt_eval_count", "eval_count") if isinstance(payload.get(k), int)
        }
        return GenerationResponse(
            text=text,
            model_name=payload.get("model", req.model_name),
            latency_ms=latency_ms,
            token_counts=token_counts or None,
        )

    def _post_with_retries(self, url: str, body: str, timeout_s: float) -> str:
        last: ClientError | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            try:
                resp = self._session.post(
                    url, data=body.encode("utf-8"),
                    headers={"Content-Type": "application/json"},
                    timeout=timeout_s,
                )
            except requests.exceptions.Timeout:
                last = RequestTimeout(f"no response within {timeout_s}s")
            except requests.exceptions.ConnectionError as exc:
                last = ConnectError(str(exc))
            else:
                if resp.status_code == 404:
                    raise ModelNotFound(404, resp.text[:200])
                if resp.status_code != 200:
                    raise HttpStatusError(resp.status_code, resp.text[:200])
                return resp.text
            if attempt < self.retry.max_attempts:
                self._sleep(self.retry.delay(attempt))
        assert last is not None
        raise last


class EmbeddingProvider:
    """Client for the POST /embed endpoint; returns float32 vectors of the
    configured dimension."""

    def __init__(self, config: EmbeddingProviderConfig, sleep=time.sleep):
        self.config = config
        self._sleep = sleep
        self._session = requests.Session()

    def embed_image(self, data: bytes) -> np.ndarray:
        return self._embed("image", encode_image(data))

    def embed_text(self, text: str) -> np.ndarray:
        return self._embed("text", text)

    def _embed(self, kind: str, data: str) -> np.ndarray:
        body = json.dumps({"kind": kind, "data": data})
        raw = self._post_with_retries(self.config.endpoint.rstrip("/") + "/embed", body)
        try:
            payload = json.loads(raw)
            values = payload["vector"]
            vector = np.asarray(values, dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedBody(f"embedding response body: {exc}") from exc
        if vector.ndim != 1:
            raise MalformedBody("embedding vector is not a flat list")
        if not np.all(np.isfinite(vector)):
            raise MalformedBody("embedding vector has non-finite entries")
        if vector.size != self.config.dimension:
            raise DimensionMismatch(vector.size, self.config.dimension)
        return vector.astype(np.float32)

    def _post_with_retries(self, url: str, body: str) -> str:
        retry = self.config.retry
        timeout_s = self.config.timeout_ms / 1000.0
        last: ClientError | None = None
        for attempt in range(1, retry.max_attempts + 1):
            try:
                resp = self._session.post(
                    url, data=body.encode("utf-8"),
                    headers={"Content-Type": "application/json"},
                    timeout=timeout_s,
                )
            except requests.exceptions.Timeout:
                last = RequestTimeout(f"no response within {timeout_s}s")
            except requests.exceptions.ConnectionError as exc:
                last = ConnectError(str(exc))
            else:
                if resp.status_code != 200:
                    raise HttpStatusError(resp.status_code, resp.text[:200])
                return resp.text
            if attempt < retry.max_attempts:
                self._sleep(retry.delay(attempt))
        assert last is not None
        raise last


def health_check(endpoint: str, timeout_s: float = 5.0) -> ServerInfo:
    """Preflight probe: server version plus the models it advertises."""
    endpoint = endpoint.rstrip("/")
    session = requests.Session()
    try:
        tags = session.get(f"{endpoint}/api/tags", timeout=timeout_s)
    except requests.exceptions.Timeout as exc:
        raise RequestTimeout(str(exc)) from exc
    except requests.exceptions.ConnectionError as exc:
        raise ConnectError(str(exc)) from exc
    if tags.status_code != 200:
        raise HttpStatusError(tags.status_code, tags.text[:200])
    try:
        models = tuple(m["name"] for m in tags.json().get("models", []))
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedBody(f"tags response: {exc}") from exc
    version = None
    try:
        vresp = session.get(f"{endpoint}/api/version", timeout=timeout_s)
        if vresp.status_code == 200:
            version = vresp.json().get("version")
    except (requests.exceptions.RequestException, ValueError):
        version = None
    return ServerInfo(version=version, models=models)
