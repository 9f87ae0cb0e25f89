"""Chat-completion client: live HTTP backend plus record/replay of transcripts."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol

import httpx

log = logging.getLogger(__name__)

API_KEY_ENV = "TIPGRADE_API_KEY"
BASE_URL_ENV = "TIPGRADE_BASE_URL"
DIGEST_ALGORITHM = "sha256-json-v1"
STORE_FORMAT = "tipgrade-transcripts"
ROLES = ("system", "user", "assistant")

DEFAULT_TEMPERATURE = 0.2
DEFAULT_MAX_COMPLETION_TOKENS = 1024
DEFAULT_TIMEOUT = 120.0

_TRANSIENT_STATUS = {408, 429, 500, 502, 503, 504}
_CONTEXT_LENGTH_HINTS = ("context length", "context_length", "maximum context", "too many tokens", "prompt is too long")


class LLMError(Exception):
    pass


class TransportError(LLMError):
    """Network-level failure that persisted through every retry."""


class HTTPStatusError(LLMError):
    def __init__(self, status: int, payload: str):
        super().__init__(f"HTTP {status}: {payload[:500]}")
        self.status = status
        self.payload = payload


class ContextLengthError(HTTPStatusError):
    """The endpoint rejected the prompt as longer than the model's window."""


class ReplayMiss(LLMError):
    def __init__(self, digest: str):
        super().__init__(f"replay miss: no transcript for digest {digest}")
        self.digest = digest


@dataclass(frozen=True)
class SamplingParams:
    model_name: str
    temperature: float = DEFAULT_TEMPERATURE
    max_completion_tokens: int = DEFAULT_MAX_COMPLETION_TOKENS

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_completion_tokens < 1:
            raise ValueError("max_completion_tokens must be >= 1")

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "temperature": self.temperature,
            "max_completion_tokens": self.max_completion_tokens,
        }


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    params: SamplingParams

    def __post_init__(self) -> None:
        msgs = tuple((str(r), str(c)) for r, c in self.messages)
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        for role, _ in msgs:
            if role not in ROLES:
                raise ValueError(f"invalid role {role!r}")
        object.__setattr__(self, "messages", msgs)

    def digest(self) -> str:
        canonical = json.dumps(
            {"messages": [list(m) for m in self.messages], "params": self.params.to_dict()},
            sort_keys=True,
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def body(self) -> dict:
        return {
            "model": self.params.model_name,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.params.temperature,
            "max_tokens": self.params.max_completion_tokens,
        }

    def to_dict(self) -> dict:
        return {"messages": [list(m) for m in self.messages], "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, obj: dict) -> "ChatRequest":
        return cls(tuple(tuple(m) for m in obj["messages"]), SamplingParams(**obj["params"]))


@dataclass(frozen=True)
class Completion:
    content: str
    finish_reason: str = "stop"
    usage: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {"content": self.content, "finish_reason": self.finish_reason, "usage": list(self.usage) if self.usage else None}

    @classmethod
    def from_dict(cls, obj: dict) -> "Completion":
        usage = obj.get("usage")
        return cls(obj.get("content") or "", obj.get("finish_reason") or "stop", tuple(usage) if usage else None)


@dataclass(frozen=True)
class Transcript:
    request_digest: str
    request: ChatRequest
    completion: Completion
    timestamp: str
    attempt: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": "transcript",
            "digest": self.request_digest,
            "attempt": self.attempt,
            "request": self.request.to_dict(),
            "completion": self.completion.to_dict(),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Transcript":
        return cls(
            obj["digest"],
            ChatRequest.from_dict(obj["request"]),
            Completion.from_dict(obj["completion"]),
            obj.get("timestamp", ""),
            int(obj.get("attempt", 0)),
        )


class TranscriptStore:
    """Append-only JSON-lines log of request/completion pairs.

    The first line is a header naming the digest algorithm. Lookups are by
    (digest, attempt); when fewer attempts were recorded than requested the
    latest recorded one is served again.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._by_digest: dict[str, list[Transcript]] = {}
        self._count = 0
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                if obj.get("kind") == "header":
                    algo = obj.get("digest_algorithm")
                    if algo != DIGEST_ALGORITHM:
                        raise LLMError(f"{self.path}: unsupported digest algorithm {algo!r}")
                    continue
                if obj.get("kind") != "transcript":
                    raise LLMError(f"{self.path}:{lineno}: unexpected record kind {obj.get('kind')!r}")
                self._index(Transcript.from_dict(obj))

    def _index(self, t: Transcript) -> None:
        self._by_digest.setdefault(t.request_digest, []).append(t)
        self._count += 1

    def __len__(self) -> int:
        return self._count

    def __contains__(self, digest: str) -> bool:
        return digest in self._by_digest

    def transcripts(self) -> list[Transcript]:
        return [t for ts in self._by_digest.values() for t in ts]

    def lookup(self, digest: str, attempt: int = 0) -> Transcript:
        entries = self._by_digest.get(digest)
        if not entries:
            raise ReplayMiss(digest)
        best = None
        for t in entries:
            if t.attempt == attempt:
                return t
            if t.attempt < attempt and (best is None or t.attempt > best.attempt):
                best = t
        return best if best is not None else entries[-1]

    def append(self, t: Transcript) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists() or self.path.stat().st_size == 0
            with self.path.open("a", encoding="utf-8") as fh:
                if new:
                    header = {"kind": "header", "format": STORE_FORMAT, "version": 1, "digest_algorithm": DIGEST_ALGORITHM}
                    fh.write(json.dumps(header) + "\n")
                fh.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")
            self._index(t)

    def file_digest(self) -> str | None:
        if not self.path.exists():
            return None
        return hashlib.sha256(self.path.read_bytes()).hexdigest()


class ClientBackend(Protocol):
    def complete(self, req: ChatRequest, attempt: int = 0) -> Completion: ...


@dataclass
class HttpBackend:
    """Live backend speaking the chat-completions wire format.

    Transport errors and transient statuses are retried with exponential
    backoff; the summed sleep never exceeds ``backoff_ceiling`` seconds.
    """

    base_url: str
    api_key: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    max_retries: int = 3
    backoff_base: float = 1.0
    backoff_ceiling: float = 60.0
    max_in_flight: int = 4
    transport: httpx.BaseTransport | None = None
    sleep: object = time.sleep
    retry_count: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(self.max_in_flight)
        self._count_lock = threading.Lock()
        self._client = httpx.Client(timeout=self.timeout, transport=self.transport)

    @classmethod
    def from_env(cls, base_url: str | None = None, **kwargs) -> "HttpBackend":
        url = base_url or os.environ.get(BASE_URL_ENV)
        if not url:
            raise LLMError(f"no base URL: pass one or set {BASE_URL_ENV}")
        return cls(url, api_key=os.environ.get(API_KEY_ENV), **kwargs)

    @property
    def endpoint(self) -> str:
        return self.base_url.rstrip("/") + "/v1/chat/completions"

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, req: ChatRequest, attempt: int = 0) -> Completion:
        slept = 0.0
        tries = 0
        while True:
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=req.body(), headers=self._headers())
            except httpx.TransportError as exc:
                failure: LLMError = TransportError(f"{type(exc).__name__}: {exc}")
            else:
                if resp.status_code < 300:
                    return _parse_response(resp)
                payload = resp.text
                if resp.status_code == 400 and any(h in payload.lower() for h in _CONTEXT_LENGTH_HINTS):
                    raise ContextLengthError(resp.status_code, payload)
                if resp.status_code not in _TRANSIENT_STATUS:
                    raise HTTPStatusError(resp.status_code, payload)
                failure = HTTPStatusError(resp.status_code, payload)

            delay = min(self.backoff_base * 2**tries * (1 + 0.1 * random.random()), self.backoff_ceiling - slept)
            if tries >= self.max_retries or delay <= 0:
                raise failure
            tries += 1
            with self._count_lock:
                self.retry_count += 1
            log.warning("retry %d/%d after %s (sleep %.2fs)", tries, self.max_retries, failure, delay)
            self.sleep(delay)
            slept += delay


def _parse_response(resp: httpx.Response) -> Completion:
    try:
        data = resp.json()
        choice = data["choices"][0]
        content = choice["message"].get("content") or ""
    except (ValueError, KeyError, IndexError, TypeError, AttributeError) as exc:
        raise HTTPStatusError(resp.status_code, f"unexpected response body: {resp.text[:500]}") from exc
    usage = data.get("usage") or None
    pair = (int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))) if usage else None
    return Completion(content, choice.get("finish_reason") or "stop", pair)


@dataclass
class ReplayBackend:
    """Serves stored completions; never touches the network."""

    store: TranscriptStore

    def complete(self, req: ChatRequest, attempt: int = 0) -> Completion:
        return self.store.lookup(req.digest(), attempt).completion


@dataclass
class RecordingBackend:
    """Wraps a live backend and appends every exchange to a transcript store."""

    live: ClientBackend
    store: TranscriptStore

    def complete(self, req: ChatRequest, attempt: int = 0) -> Completion:
        return record(self.live, self.store, req, attempt)


def complete(backend: ClientBackend, req: ChatRequest, attempt: int = 0) -> Completion:
    return backend.complete(req, attempt)


def record(backend: ClientBackend, store: TranscriptStore, req: ChatRequest, attempt: int = 0) -> Completion:
    completion = backend.complete(req, attempt)
    stamp = datetime.now(timezone.utc).isoformat()
    store.append(Transcript(req.digest(), req, completion, stamp, attempt))
    return completion
