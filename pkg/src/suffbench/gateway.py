"""Access layer for generation, teacher-forced scoring, and embeddings.

All three request kinds go through one Gateway that adds, in order: an
on-disk response cache keyed by the SHA-256 of the canonical request
JSON, per-endpoint rate limiting, and retry with exponential backoff.
Cache hits replay the stored body through the same response parsers
with no network traffic, so cached and live runs are byte-equivalent.

Endpoints whose base_url uses the ``mock://<seed>`` scheme are served
by a deterministic in-process backend instead of HTTP, which lets the
whole pipeline run offline. Mock responses use the same wire shapes as
the OpenAI-compatible endpoints and flow through the same parsers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING
from urllib.parse import urlparse

import requests

if TYPE_CHECKING:
    from .prompts import RenderedPrompt

log = logging.getLogger(__name__)

FINISH_REASONS = ("stop", "length", "other")


class GatewayError(RuntimeError):
    """Base class for transport and response-shape failures."""


class RequestFailed(GatewayError):
    """Non-retryable HTTP error (4xx other than 429), body attached."""

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class RetriesExhausted(GatewayError):
    """Retryable failures (429/5xx/timeout) persisted past the budget."""


class EmptyCompletion(GatewayError):
    """HTTP success but no usable completion text."""


class LogprobsUnsupported(GatewayError):
    """Backend cannot return per-token logprobs; scoring must fail loudly."""


class TokenAlignmentError(GatewayError):
    """Echoed tokens do not line up with the prompt/continuation split."""


class EmbeddingDimensionError(GatewayError):
    """Embedding width changed between calls to the same model."""


@dataclass(frozen=True)
class ModelEndpoint:
    """One OpenAI-compatible endpoint (or a mock:// stand-in)."""

    base_url: str
    model_id: str
    api_key_ref: str = ""
    max_retries: int = 3
    requests_per_minute: int = 60
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if not self.base_url:
            raise ValueError("base_url must be non-empty")
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith("mock://")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    finish_reason: str
    request_fingerprint: str

    def __post_init__(self) -> None:
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"finish_reason {self.finish_reason!r} not in {FINISH_REASONS}")


@dataclass(frozen=True)
class LogprobResult:
    """Teacher-forced logprobs for one continuation.

    Token texts must concatenate exactly to the continuation and the
    total must equal the plain (unnormalized) sum of the token logprobs.
    """

    continuation: str
    token_logprobs: tuple[tuple[str, float], ...]
    total_logprob: float

    def __post_init__(self) -> None:
        joined = "".join(text for text, _ in self.token_logprobs)
        if joined != self.continuation:
            raise TokenAlignmentError(
                f"tokens {joined!r} do not concatenate to continuation {self.continuation!r}"
            )
        total = sum(lp for _, lp in self.token_logprobs)
        if abs(total - self.total_logprob) > 1e-9:
            raise ValueError(f"total_logprob {self.total_logprob} != token sum {total}")


@dataclass(frozen=True)
class EmbeddingResult:
    vector: tuple[float, ...]
    model_id: str

    def __post_init__(self) -> None:
        if not self.vector:
            raise ValueError("embedding vector must be non-empty")


def request_fingerprint(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed raw response bodies, written atomically."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> bytes | None:
        try:
            return self._path(key).read_bytes()
        except FileNotFoundError:
            return None

    def put(self, key: str, body: bytes) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp"
        tmp.write_bytes(body)
        os.replace(tmp, path)


class RateLimiter:
    """At most `limit` admissions within any 60-second window.

    Keeps a sliding log of admission times instead of a refill counter:
    a refill scheme lets a burst straddle two refills and overrun the
    windowed bound this class has to keep. An admission exactly 60 s
    after another no longer counts against it (half-open window).
    """

    WINDOW = 60.0

    def __init__(self, limit: int, clock=time.monotonic, sleep=time.sleep):
        if limit < 1:
            raise ValueError("limit must be >= 1")
        self._limit = limit
        self._clock = clock
        self._sleep = sleep
        self._log: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._log and now - self._log[0] >= self.WINDOW:
                    self._log.popleft()
                if len(self._log) < self._limit:
                    self._log.append(now)
                    return
                wait = self.WINDOW - (now - self._log[0])
            self._sleep(max(wait, 0.0))


_BUDGET_RE = re.compile(r"(?:at most|حداکثر)\s+(\d+)\s+(?:words|کلمه)")
_WORD_POOL = (
    "the", "plant", "uses", "light", "energy", "to", "move", "heat", "through",
    "air", "water", "cells", "store", "food", "and", "rocks", "change", "slowly",
    "over", "time", "animals", "adapt", "while", "systems", "stay", "balanced",
)


def _mock_seed(base_url: str) -> int:
    netloc = urlparse(base_url).netloc
    if netloc.isdigit():
        return int(netloc)
    return int.from_bytes(hashlib.sha256(netloc.encode("utf-8")).digest()[:4], "big")


class MockBackend:
    """Deterministic offline stand-in for all three endpoint kinds.

    Generation is a pure function of (seed, model, prompt, params).
    Rewrite prompts stating a word budget get exactly that many words
    back; anything else gets a parseable Answer/Explanation block.
    Scoring gives every continuation token a logprob of -1.0, so the
    four option letters always tie. Embeddings are unit-norm vectors
    seeded by the text hash, fixed width EMBED_DIM.
    """

    EMBED_DIM = 32

    def __init__(self, seed: int):
        self.seed = seed
        self.counts = {"generate": 0, "logprobs": 0, "embeddings": 0}
        self._lock = threading.Lock()

    def _rng(self, *parts) -> random.Random:
        blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
        return random.Random(int.from_bytes(hashlib.sha256(blob).digest()[:8], "big"))

    def generate(self, model_id: str, prompt_text: str, temperature: float, max_tokens: int) -> dict:
        with self._lock:
            self.counts["generate"] += 1
        rng = self._rng("generate", self.seed, model_id, prompt_text, temperature, max_tokens)
        budget_match = _BUDGET_RE.search(prompt_text)
        if budget_match:
            budget = int(budget_match.group(1))
            text = " ".join(rng.choice(_WORD_POOL) for _ in range(budget))
        else:
            letter = rng.choice("ABCD")
            body = " ".join(rng.choice(_WORD_POOL) for _ in range(rng.randint(18, 32)))
            text = f"Answer: {letter}\nExplanation: The {body}."
        return {
            "object": "chat.completion",
            "model": model_id,
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": "stop",
                }
            ],
        }

    def score(self, model_id: str, prompt_text: str, continuation: str) -> dict:
        with self._lock:
            self.counts["logprobs"] += 1
        # prompt echoed as one scoreless token; continuation split on
        # whitespace-prefixed runs so offsets line up exactly
        tokens = re.findall(r"\s*\S+", continuation)
        consumed = "".join(tokens)
        if consumed != continuation:
            tokens.append(continuation[len(consumed):])
        offsets, pos = [], len(prompt_text)
        for token in tokens:
            offsets.append(pos)
            pos += len(token)
        return {
            "object": "text_completion",
            "model": model_id,
            "choices": [
                {
                    "index": 0,
                    "text": prompt_text + continuation,
                    "finish_reason": "stop",
                    "logprobs": {
                        "tokens": [prompt_text] + tokens,
                        "token_logprobs": [None] + [-1.0] * len(tokens),
                        "text_offset": [0] + offsets,
                    },
                }
            ],
        }

    def embed(self, model_id: str, text: str) -> dict:
        with self._lock:
            self.counts["embeddings"] += 1
        rng = self._rng("embed", text)
        vector = [rng.gauss(0.0, 1.0) for _ in range(self.EMBED_DIM)]
        norm = sum(x * x for x in vector) ** 0.5
        vector = [x / norm for x in vector]
        return {
            "object": "list",
            "model": model_id,
            "data": [{"object": "embedding", "index": 0, "embedding": vector}],
        }


def _encode(data: dict) -> bytes:
    return json.dumps(data, ensure_ascii=False).encode("utf-8")


class Gateway:
    """Entry point for every outbound model call the pipeline makes."""

    BACKOFF_BASE = 0.5

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        *,
        force_refresh: bool = False,
        clock=time.monotonic,
        sleep=time.sleep,
        session: requests.Session | None = None,
    ):
        self._cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self._force_refresh = force_refresh
        self._clock = clock
        self._sleep = sleep
        self._session = session or requests.Session()
        self._mocks: dict[str, MockBackend] = {}
        self._limiters: dict[tuple[str, str], RateLimiter] = {}
        self._embed_dims: dict[str, int] = {}
        self._lock = threading.Lock()

    # -- shared plumbing ---------------------------------------------------

    def _mock(self, endpoint: ModelEndpoint) -> MockBackend:
        with self._lock:
            backend = self._mocks.get(endpoint.base_url)
            if backend is None:
                backend = MockBackend(_mock_seed(endpoint.base_url))
                self._mocks[endpoint.base_url] = backend
            return backend

    def mock_counts(self) -> dict[str, int]:
        """Aggregate backend-call counters across all mock endpoints."""
        totals = {"generate": 0, "logprobs": 0, "embeddings": 0}
        with self._lock:
            for backend in self._mocks.values():
                for kind, count in backend.counts.items():
                    totals[kind] += count
        return totals

    def _limiter(self, endpoint: ModelEndpoint) -> RateLimiter:
        key = (endpoint.base_url, endpoint.model_id)
        with self._lock:
            limiter = self._limiters.get(key)
            if limiter is None:
                limiter = RateLimiter(endpoint.requests_per_minute, self._clock, self._sleep)
                self._limiters[key] = limiter
            return limiter

    def _cached(self, key: str) -> bytes | None:
        if self._cache is None or self._force_refresh:
            return None
        return self._cache.get(key)

    def _store(self, key: str, body: bytes) -> None:
        if self._cache is not None:
            self._cache.put(key, body)

    def _decode(self, body: bytes, key: str) -> dict:
        try:
            return json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise GatewayError(f"unreadable response body for request {key}: {exc}") from exc

    def _post(self, endpoint: ModelEndpoint, path: str, payload: dict) -> bytes:
        url = endpoint.base_url.rstrip("/") + path
        headers = {}
        if endpoint.api_key_ref:
            api_key = os.environ.get(endpoint.api_key_ref)
            if not api_key:
                raise GatewayError(
                    f"api_key_ref names env var {endpoint.api_key_ref!r}, which is not set"
                )
            headers["Authorization"] = f"Bearer {api_key}"
        attempts = endpoint.max_retries + 1
        failure = ""
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.BACKOFF_BASE * 2 ** (attempt - 1))
            self._limiter(endpoint).acquire()
            try:
                response = self._session.post(
                    url, json=payload, headers=headers, timeout=endpoint.timeout
                )
            except requests.Timeout:
                failure = "timeout"
                log.warning("%s attempt %d/%d timed out", url, attempt + 1, attempts)
                continue
            except requests.ConnectionError as exc:
                failure = f"connection error: {exc}"
                log.warning("%s attempt %d/%d failed: %s", url, attempt + 1, attempts, failure)
                continue
            if response.status_code == 200:
                return response.content
            failure = f"HTTP {response.status_code}"
            if response.status_code == 429 or response.status_code >= 500:
                log.warning("%s attempt %d/%d got %s", url, attempt + 1, attempts, failure)
                continue
            raise RequestFailed(
                f"{url} rejected the request: {failure}: {response.text[:500]}",
                status=response.status_code,
                body=response.text,
            )
        raise RetriesExhausted(f"{url} still failing after {attempts} attempts ({failure})")

    # -- generation ----------------------------------------------------------

    def generate(
        self,
        endpoint: ModelEndpoint,
        prompt: "RenderedPrompt",
        *,
        temperature: float = 0.0,
        max_tokens: int = 512,
        cache_salt: str = "",
    ) -> GenerationResult:
        """Chat completion for one rendered prompt.

        cache_salt distinguishes deliberate re-asks of an identical
        deterministic request (budget-violation retries); it enters the
        fingerprint but not the wire payload.
        """
        payload = {
            "kind": "chat.completions",
            "model": endpoint.model_id,
            "prompt": prompt.text,
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        if cache_salt:
            payload["cache_salt"] = cache_salt
        key = request_fingerprint(payload)
        body = self._cached(key)
        if body is None:
            if endpoint.is_mock:
                body = _encode(
                    self._mock(endpoint).generate(
                        endpoint.model_id, prompt.text, temperature, max_tokens
                    )
                )
            else:
                wire = {
                    "model": endpoint.model_id,
                    "messages": [{"role": "user", "content": prompt.text}],
                    "temperature": temperature,
                    "max_tokens": max_tokens,
                }
                body = self._post(endpoint, "/chat/completions", wire)
            self._store(key, body)
        data = self._decode(body, key)
        try:
            choice = data["choices"][0]
        except (KeyError, IndexError, TypeError):
            raise EmptyCompletion(f"response for {key} carries no choices") from None
        text = (choice.get("message") or {}).get("content") or ""
        if not text.strip():
            raise EmptyCompletion(f"{endpoint.model_id} returned an empty completion")
        finish = choice.get("finish_reason")
        if finish not in FINISH_REASONS:
            finish = "other"
        return GenerationResult(text=text, finish_reason=finish, request_fingerprint=key)

    # -- teacher-forced scoring ----------------------------------------------

    def score_continuation(
        self, endpoint: ModelEndpoint, prompt_text: str, continuation: str
    ) -> LogprobResult:
        """Sum of token logprobs for `continuation` appended to `prompt_text`.

        Uses echo mode with max_tokens=0 so the backend scores the given
        text instead of sampling. Continuation tokens are selected by
        text offset; any misalignment with the prompt boundary is a hard
        error, never silently truncated.
        """
        if not continuation:
            raise ValueError("continuation must be non-empty")
        payload = {
            "kind": "completions.logprobs",
            "model": endpoint.model_id,
            "prompt": prompt_text,
            "continuation": continuation,
        }
        key = request_fingerprint(payload)
        body = self._cached(key)
        if body is None:
            if endpoint.is_mock:
                body = _encode(
                    self._mock(endpoint).score(endpoint.model_id, prompt_text, continuation)
                )
            else:
                wire = {
                    "model": endpoint.model_id,
                    "prompt": prompt_text + continuation,
                    "max_tokens": 0,
                    "echo": True,
                    "logprobs": 1,
                }
                body = self._post(endpoint, "/completions", wire)
            self._store(key, body)
        data = self._decode(body, key)
        try:
            choice = data["choices"][0]
        except (KeyError, IndexError, TypeError):
            raise EmptyCompletion(f"response for {key} carries no choices") from None
        blob = choice.get("logprobs")
        if not blob:
            raise LogprobsUnsupported(
                f"{endpoint.model_id} returned no logprobs; teacher-forced scoring is impossible"
            )
        tokens = blob.get("tokens")
        logprobs = blob.get("token_logprobs")
        offsets = blob.get("text_offset")
        if tokens is None or logprobs is None or offsets is None:
            raise LogprobsUnsupported(f"{endpoint.model_id} logprobs block is incomplete")
        boundary = len(prompt_text)
        selected = [
            (token, lp, off)
            for token, lp, off in zip(tokens, logprobs, offsets)
            if off >= boundary
        ]
        if not selected or selected[0][2] != boundary:
            got = selected[0][2] if selected else "none"
            raise TokenAlignmentError(
                f"continuation tokens start at offset {got}, expected {boundary}"
            )
        if any(lp is None for _, lp, _ in selected):
            raise LogprobsUnsupported(f"{endpoint.model_id} omitted continuation logprobs")
        token_logprobs = tuple((token, float(lp)) for token, lp, _ in selected)
        total = sum(lp for _, lp in token_logprobs)
        return LogprobResult(
            continuation=continuation, token_logprobs=token_logprobs, total_logprob=total
        )

    # -- embeddings ------------------------------------------------------------

    def embed(self, endpoint: ModelEndpoint, text: str) -> EmbeddingResult:
        """Embedding vector for one text; width is pinned by the first call
        per model and any later mismatch is fatal."""
        if not text.strip():
            raise ValueError("embedding input must be non-empty")
        payload = {"kind": "embeddings", "model": endpoint.model_id, "input": text}
        key = request_fingerprint(payload)
        body = self._cached(key)
        if body is None:
            if endpoint.is_mock:
                body = _encode(self._mock(endpoint).embed(endpoint.model_id, text))
            else:
                wire = {"model": endpoint.model_id, "input": text}
                body = self._post(endpoint, "/embeddings", wire)
            self._store(key, body)
        data = self._decode(body, key)
        try:
            vector = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError):
            raise GatewayError(f"response for {key} carries no embedding") from None
        if not isinstance(vector, list) or not vector:
            raise GatewayError(f"response for {key} carries an empty embedding")
        with self._lock:
            expected = self._embed_dims.setdefault(endpoint.model_id, len(vector))
        if len(vector) != expected:
            raise EmbeddingDimensionError(
                f"{endpoint.model_id} returned dim {len(vector)}, previously {expected}"
            )
        return EmbeddingResult(vector=tuple(float(x) for x in vector), model_id=endpoint.model_id)
