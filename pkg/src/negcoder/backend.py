"""Completion backends: an HTTP client and a scripted mock behind one contract."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import httpx

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.2


@dataclass(frozen=True)
class RunTag:
    segment_index: int
    run_index: int
    transcript_id: str = ""

    def __str__(self) -> str:
        prefix = f"{self.transcript_id}#" if self.transcript_id else ""
        return f"{prefix}seg{self.segment_index}/run{self.run_index}"


class BackendError(RuntimeError):
    """A completion that could not be obtained."""

    kind = "backend"

    def __init__(self, message: str, run_tag: RunTag | None = None, attempts: int = 1):
        self.run_tag = run_tag
        self.attempts = attempts
        where = f"[{run_tag}] " if run_tag else ""
        super().__init__(f"{where}{message}")


class TransportError(BackendError):
    kind = "transport"


class AuthenticationError(BackendError):
    kind = "auth"


class RateLimitError(BackendError):
    kind = "rate_limit"


class BackendTimeout(BackendError):
    kind = "timeout"


ERRORS_BY_KIND = {
    cls.kind: cls for cls in (BackendError, TransportError, AuthenticationError, RateLimitError, BackendTimeout)
}


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = 4096
    run_tag: RunTag = field(default_factory=lambda: RunTag(0, 1))

    def __post_init__(self):
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    latency_ms: int
    backend_name: str


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint_url: str | None = None
    model_id: str | None = None
    auth_token_env_var_name: str | None = None
    timeout_ms: int = 120_000
    max_retries: int = 3
    retry_backoff_ms: int = 1000
    request_style: str = "prompt"
    response_path: str | None = None
    mock_script_path: str | None = None
    mock_seed: int | None = None
    mock_jitter_ms: int = 0

    def __post_init__(self):
        if self.kind not in ("http", "mock"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not (self.endpoint_url and self.model_id):
            raise ValueError("http backend requires endpoint_url and model_id")
        if self.request_style not in ("prompt", "messages"):
            raise ValueError(f"unknown request_style {self.request_style!r}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class BatchItem:
    request: CompletionRequest
    response: CompletionResponse | None = None
    error: BackendError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def extract_path(doc: Any, path: str) -> Any:
    """Follow a dotted path such as ``choices.0.message.content``."""
    cur = doc
    for part in path.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        elif isinstance(cur, dict):
            cur = cur[part]
        else:
            raise KeyError(part)
    return cur


class HttpBackend:
    name = "http"

    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self.transport = transport
        self.response_path = cfg.response_path or (
            "choices.0.message.content" if cfg.request_style == "messages" else "choices.0.text"
        )

    def _headers(self, tag: RunTag) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        var = self.cfg.auth_token_env_var_name
        if var:
            token = os.environ.get(var)
            if not token:
                raise AuthenticationError(f"environment variable {var} is not set", tag, attempts=0)
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _body(self, req: CompletionRequest) -> dict:
        body: dict[str, Any] = {
            "model": self.cfg.model_id,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if self.cfg.request_style == "messages":
            body["messages"] = [{"role": "user", "content": req.prompt}]
        else:
            body["prompt"] = req.prompt
        return body

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        tag = req.run_tag
        headers = self._headers(tag)
        body = self._body(req)
        attempts = 0
        last: BackendError | None = None
        with httpx.Client(timeout=self.cfg.timeout_ms / 1000, transport=self.transport) as client:
            while attempts <= self.cfg.max_retries:
                if attempts:
                    delay = self.cfg.retry_backoff_ms * 2 ** (attempts - 1) / 1000
                    log.info("retrying %s in %.3fs after %s", tag, delay, last)
                    time.sleep(delay)
                attempts += 1
                started = time.monotonic()
                try:
                    resp = client.post(self.cfg.endpoint_url, json=body, headers=headers)
                except httpx.TimeoutException as exc:
                    last = BackendTimeout(f"timed out: {exc}", tag, attempts)
                    continue
                except httpx.TransportError as exc:
                    last = TransportError(f"transport failure: {exc}", tag, attempts)
                    continue
                latency = int((time.monotonic() - started) * 1000)
                if resp.status_code in (401, 403):
                    raise AuthenticationError(f"authentication failed (HTTP {resp.status_code})", tag, attempts)
                if resp.status_code == 429:
                    last = RateLimitError("rate limited (HTTP 429)", tag, attempts)
                    continue
                if resp.status_code >= 500:
                    last = TransportError(f"server error (HTTP {resp.status_code})", tag, attempts)
                    continue
                if resp.status_code >= 400:
                    raise BackendError(f"request rejected (HTTP {resp.status_code}): {resp.text[:200]}", tag, attempts)
                try:
                    text = extract_path(resp.json(), self.response_path)
                except (ValueError, KeyError, IndexError, TypeError):
                    raise BackendError(f"response has no value at {self.response_path!r}", tag, attempts) from None
                return CompletionResponse(str(text) if text is not None else "", latency, self.name)
        assert last is not None
        raise type(last)(f"giving up after {attempts} attempts: {last}", tag, attempts)


def make_backend(cfg: BackendConfig):
    if cfg.kind == "http":
        return HttpBackend(cfg)
    from .mock import MockBackend

    return MockBackend.from_config(cfg)


def complete(req: CompletionRequest, cfg: BackendConfig, backend=None) -> CompletionResponse:
    backend = backend or make_backend(cfg)
    log.debug("%s: ~%d prompt words", req.run_tag, len(req.prompt.split()))
    return backend.complete(req)


def complete_batch(
    requests: Sequence[CompletionRequest],
    cfg: BackendConfig,
    max_in_flight: int = 5,
    backend=None,
) -> list[BatchItem]:
    """Run requests concurrently; results come back in request order."""
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    backend = backend or make_backend(cfg)
    items = [BatchItem(r) for r in requests]

    def run(item: BatchItem) -> None:
        try:
            item.response = complete(item.request, cfg, backend)
        except BackendError as exc:
            log.warning("%s", exc)
            item.error = exc

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        list(pool.map(run, items))
    return items
