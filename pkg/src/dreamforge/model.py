"""Uniform model access with a persistent per-prompt result cache.

A ModelRef names a provider (an OpenAI-compatible HTTP endpoint, or the
deterministic mock used throughout the test suite) plus the metadata that
travels into provenance cards. Every generation is keyed by a fingerprint
over {model, config, system prompt, prompt} and stored append-only in a
single SQLite file, so a rerun never re-issues a prompt and a shared session
folder can replay a workflow with the transport disabled entirely.

Mock provider contract (pinned, cross-platform):

    generate -> "MOCK:" + first 16 hex chars of
                SHA-256(model_id 0x1F system 0x1F prompt 0x1F canonical(cfg))
    embed    -> 16 components, component j = byte j of SHA-256(text) / 255.0
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import sqlite3
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import requests

from .errors import AuthMissing, ProviderError, ReplayMiss
from .fingerprint import Fingerprint, canonical_bytes, fingerprint, make_node, to_jsonable

LIVE = "live"
REPLAY = "replay"

PROVIDER_MOCK = "mock"
PROVIDER_HTTP = "http_openai_compat"

MOCK_EMBEDDING_DIM = 16

# retry policy constants
RETRYABLE_CLASSES = frozenset({"rate_limited", "server_error", "network"})
MAX_ATTEMPTS = 6
BASE_DELAY = 1.0
BACKOFF_FACTOR = 2.0


@dataclass(frozen=True)
class GenerationConfig:
    """Sampling configuration. Every field enters both the prompt-cache key
    and the step fingerprint: config changes invalidate caches by design."""

    temperature: float = 0.0
    max_tokens: int = 256
    seed: int | None = None
    stop: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        if self.stop is not None and not isinstance(self.stop, tuple):
            object.__setattr__(self, "stop", tuple(self.stop))

    def to_canonical(self) -> dict:
        # Optionals are kept as explicit nulls so the canonical form has a
        # fixed key set.
        return {
            "temperature": float(self.temperature),
            "max_tokens": self.max_tokens,
            "seed": self.seed,
            "stop": list(self.stop) if self.stop is not None else None,
        }


@dataclass(frozen=True)
class ModelRef:
    """Reference to a generation/embedding provider plus card metadata."""

    provider: str
    model_id: str
    endpoint: str = ""
    license: str | None = None
    citation: str | None = None
    api_key_env: str = "DREAMFORGE_API_KEY_OPENAI"

    def __post_init__(self):
        if self.provider not in (PROVIDER_MOCK, PROVIDER_HTTP):
            raise ValueError(f"unknown provider: {self.provider!r}")
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if self.provider == PROVIDER_HTTP and not self.endpoint.startswith(("http://", "https://")):
            raise ValueError(f"http provider needs an absolute endpoint URL, got {self.endpoint!r}")

    def fingerprint(self) -> Fingerprint:
        """Covers provider identity only; license/citation are card metadata
        and must not perturb cache keys."""
        args = {"provider": self.provider, "endpoint": self.endpoint, "model_id": self.model_id}
        return fingerprint(make_node("model", 1, args, []))


def cache_key(model: ModelRef, cfg: GenerationConfig, system_prompt: str | None, prompt: str) -> Fingerprint:
    return fingerprint({
        "model": model.fingerprint(),
        "config": cfg.to_canonical(),
        "system_prompt": system_prompt,
        "prompt": prompt,
    })


def embed_key(model: ModelRef, text: str) -> Fingerprint:
    return fingerprint({"kind": "embed", "model": model.fingerprint(), "text": text})


class PromptCache:
    """Append-only key/value store over a single SQLite file.

    Writes are committed per call, so a completion survives any later crash.
    A key is never overwritten with a different value: the first write wins
    and every reader sees the stored value.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(str(self.path), check_same_thread=False)
        with self._lock:
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS entries ("
                " key TEXT PRIMARY KEY,"
                " value TEXT NOT NULL,"
                " node TEXT NOT NULL,"
                " created_at TEXT NOT NULL)"
            )
            self._conn.commit()

    def get(self, key: str) -> str | None:
        with self._lock:
            row = self._conn.execute("SELECT value FROM entries WHERE key = ?", (str(key),)).fetchone()
        return row[0] if row else None

    def put(self, key: str, value: str, node: str = "{}") -> str:
        """Store value under key; returns the value actually stored (the
        existing one if the key was already present)."""
        from datetime import datetime, timezone

        created = datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")
        with self._lock:
            self._conn.execute(
                "INSERT OR IGNORE INTO entries (key, value, node, created_at) VALUES (?, ?, ?, ?)",
                (str(key), value, node, created),
            )
            self._conn.commit()
            row = self._conn.execute("SELECT value FROM entries WHERE key = ?", (str(key),)).fetchone()
        return row[0]

    def items(self) -> list[tuple[str, str]]:
        with self._lock:
            return list(self._conn.execute("SELECT key, value FROM entries ORDER BY key"))

    def __len__(self) -> int:
        with self._lock:
            return self._conn.execute("SELECT COUNT(*) FROM entries").fetchone()[0]

    def close(self) -> None:
        with self._lock:
            self._conn.close()


class MockTransport:
    """Deterministic offline provider; counts its calls for cache tests."""

    def __init__(self, delay: float = 0.0) -> None:
        self.delay = delay
        self.calls = 0
        self._lock = threading.Lock()

    def _count(self) -> None:
        with self._lock:
            self.calls += 1
        if self.delay:
            time.sleep(self.delay)

    def generate(self, model: ModelRef, system_prompt: str | None, prompt: str, cfg: GenerationConfig) -> str:
        self._count()
        data = (
            model.model_id.encode("utf-8") + b"\x1f"
            + (system_prompt or "").encode("utf-8") + b"\x1f"
            + prompt.encode("utf-8") + b"\x1f"
            + canonical_bytes(cfg.to_canonical())
        )
        return "MOCK:" + hashlib.sha256(data).hexdigest()[:16]

    def embed(self, model: ModelRef, text: str) -> list[float]:
        self._count()
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        return [digest[j] / 255.0 for j in range(MOCK_EMBEDDING_DIM)]


class DisabledTransport:
    """Transport stand-in that refuses every call; used to prove a replay
    run never leaves the cache."""

    calls = 0

    def generate(self, model, system_prompt, prompt, cfg):
        raise ProviderError("transport is disabled", error_class="network")

    def embed(self, model, text):
        raise ProviderError("transport is disabled", error_class="network")


def retry_policy(attempt: int, error_class: str, rng=random) -> float | None:
    """Backoff decision after a failed attempt: a full-jitter delay in
    [0, 1s * 2^(attempt-1)] for retryable classes, None (give up) past
    attempt 6 or for non-retryable classes."""
    if attempt < 1:
        raise ValueError("attempt must be >= 1")
    if error_class not in RETRYABLE_CLASSES:
        return None
    if attempt > MAX_ATTEMPTS:
        return None
    return rng.uniform(0.0, BASE_DELAY * BACKOFF_FACTOR ** (attempt - 1))


class HttpTransport:
    """OpenAI-compatible HTTP provider.

    POSTs to <endpoint>/v1/chat/completions and /v1/embeddings with a Bearer
    token taken from the environment variable named by the ModelRef. Retries
    rate limits, server errors and network failures per retry_policy.
    """

    def __init__(self, timeout: float = 60.0, sleeper=time.sleep, rng=random) -> None:
        self.timeout = timeout
        self._sleep = sleeper
        self._rng = rng

    def _headers(self, model: ModelRef) -> dict:
        headers = {"Content-Type": "application/json"}
        if model.api_key_env:
            key = os.environ.get(model.api_key_env)
            if key is None:
                raise AuthMissing(f"environment variable {model.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, url: str, payload: dict, headers: dict) -> dict:
        attempt = 1
        while True:
            try:
                resp = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as e:
                failure, error_class = str(e), "network"
            else:
                if resp.status_code == 200:
                    return resp.json()
                failure = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code == 429:
                    error_class = "rate_limited"
                elif resp.status_code >= 500:
                    error_class = "server_error"
                elif resp.status_code in (401, 403):
                    error_class = "auth"
                else:
                    error_class = "bad_request"
            delay = retry_policy(attempt, error_class, rng=self._rng)
            if delay is None:
                raise ProviderError(f"{url} failed on attempt {attempt}: {failure}", error_class=error_class)
            self._sleep(delay)
            attempt += 1

    def generate(self, model: ModelRef, system_prompt: str | None, prompt: str, cfg: GenerationConfig) -> str:
        messages = []
        if system_prompt:
            messages.append({"role": "system", "content": system_prompt})
        messages.append({"role": "user", "content": prompt})
        payload = {
            "model": model.model_id,
            "messages": messages,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
            "seed": cfg.seed,
            "stop": list(cfg.stop) if cfg.stop is not None else None,
        }
        body = self._post(model.endpoint.rstrip("/") + "/v1/chat/completions", payload, self._headers(model))
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderError(f"malformed completion response: {body!r}", error_class="bad_request") from e

    def embed(self, model: ModelRef, text: str) -> list[float]:
        payload = {"model": model.model_id, "input": [text]}
        body = self._post(model.endpoint.rstrip("/") + "/v1/embeddings", payload, self._headers(model))
        try:
            return [float(x) for x in body["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderError(f"malformed embedding response: {body!r}", error_class="bad_request") from e


_default_mock = MockTransport()


def default_transport(model: ModelRef):
    if model.provider == PROVIDER_MOCK:
        return _default_mock
    return HttpTransport()


def _key_node_json(model: ModelRef, cfg: GenerationConfig, system_prompt: str | None, prompt: str) -> str:
    preimage = {
        "model": {"$fp": str(model.fingerprint())},
        "model_id": model.model_id,
        "config": to_jsonable(cfg.to_canonical()),
        "system_prompt": system_prompt,
        "prompt": prompt,
    }
    return json.dumps(preimage, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def generate(
    model: ModelRef,
    system_prompt: str | None,
    prompt: str,
    cfg: GenerationConfig,
    cache: PromptCache,
    mode: str = LIVE,
    transport=None,
) -> str:
    """One completion. Cache hits never touch the transport; replay mode
    turns a miss into ReplayMiss instead of calling out."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    key = cache_key(model, cfg, system_prompt, prompt)
    hit = cache.get(key)
    if hit is not None:
        return hit
    if mode == REPLAY:
        raise ReplayMiss(f"no cached completion for key {key.short()}... in replay mode")
    transport = transport or default_transport(model)
    value = transport.generate(model, system_prompt, prompt, cfg)
    return cache.put(key, value, node=_key_node_json(model, cfg, system_prompt, prompt))


def generate_batch(
    model: ModelRef,
    items: Sequence[tuple[str | None, str]],
    cfg: GenerationConfig,
    cache: PromptCache,
    mode: str = LIVE,
    in_flight: int = 8,
    transport=None,
) -> list[str]:
    """Batch of (system_prompt, prompt) pairs; results positionally aligned.
    Duplicate items coalesce to one transport call. The first provider error
    aborts the remaining uncached items; already completed items stay cached."""
    if in_flight < 1:
        raise ValueError("in_flight must be >= 1")
    if not items:
        return []
    keys = [cache_key(model, cfg, sp, p) for sp, p in items]
    results: dict[str, str] = {}
    pending: dict[str, tuple[str | None, str]] = {}
    for key, (sp, p) in zip(keys, items):
        if key in results or key in pending:
            continue
        hit = cache.get(key)
        if hit is not None:
            results[key] = hit
        else:
            pending[key] = (sp, p)
    if pending and mode == REPLAY:
        key = next(iter(pending))
        raise ReplayMiss(f"no cached completion for key {key[:12]}... in replay mode")
    if pending:
        transport = transport or default_transport(model)

        def fetch(key_item):
            key, (sp, p) = key_item
            if not p:
                raise ValueError("prompt must be non-empty")
            value = transport.generate(model, sp, p, cfg)
            return key, cache.put(key, value, node=_key_node_json(model, cfg, sp, p))

        with ThreadPoolExecutor(max_workers=min(in_flight, len(pending))) as pool:
            futures = [pool.submit(fetch, item) for item in pending.items()]
            error: Exception | None = None
            for fut in futures:
                if error is not None:
                    fut.cancel()
                    continue
                try:
                    key, value = fut.result()
                    results[key] = value
                except Exception as e:  # first failure aborts the rest
                    error = e
            if error is not None:
                raise error
    return [results[k] for k in keys]


def embed(
    model: ModelRef,
    texts: Sequence[str],
    cache: PromptCache,
    mode: str = LIVE,
    transport=None,
) -> list[list[float]]:
    """One fixed-dimension vector per text, cached per text."""
    out: list[list[float]] = []
    transport_resolved = None
    for text in texts:
        key = embed_key(model, text)
        hit = cache.get(key)
        if hit is not None:
            out.append(json.loads(hit))
            continue
        if mode == REPLAY:
            raise ReplayMiss(f"no cached embedding for key {key.short()}... in replay mode")
        if transport_resolved is None:
            transport_resolved = transport or default_transport(model)
        vector = transport_resolved.embed(model, text)
        node = json.dumps({"kind": "embed", "model_id": model.model_id, "text": text},
                          sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        stored = cache.put(key, json.dumps(vector), node=node)
        out.append(json.loads(stored))
    return out
