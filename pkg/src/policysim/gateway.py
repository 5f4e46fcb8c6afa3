"""Provider abstraction for chat completion, embeddings, and reward scores.

A :class:`Gateway` wraps one provider and adds retries with exponential
backoff, a bound on in-flight requests, and an audit log with one record per
attempt.  Two provider families ship here:

* :class:`HttpProvider` talks to an OpenAI-compatible endpoint.
* :class:`ScriptedProvider` answers from an ordered list of
  :class:`ScriptEntry` matchers and fails loudly on a miss.  It is what the
  test-suite and the offline demos run on.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence, Union

import numpy as np

from policysim.errors import PolicySimError

log = logging.getLogger(__name__)

GENERATION_TEMPERATURE = 0.7
JUDGE_TEMPERATURE = 0.0


class Role(str, enum.Enum):
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    messages: tuple[Message, ...] = ()
    temperature: float = JUDGE_TEMPERATURE
    seed: int | None = None
    tag: str = ""
    # structured hints for scripted providers; never sent over the wire and
    # not part of the fingerprint
    context: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        for prev, cur in zip(self.messages, self.messages[1:]):
            if prev.role is cur.role:
                raise ValueError("messages must alternate roles")
        if any(not m.content for m in self.messages):
            raise ValueError("message content must be non-empty")

    @classmethod
    def single(cls, system_prompt: str, user: str, **kw) -> "ChatRequest":
        return cls(system_prompt, (Message(Role.USER, user),), **kw)

    def text(self) -> str:
        return "\n".join([self.system_prompt, *(m.content for m in self.messages)])

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.tag.encode("utf-8"))
        h.update(b"\x1f")
        h.update("\x1e".join(m.content for m in self.messages).encode("utf-8"))
        return h.hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    content: str
    provider_id: str
    latency_ms: int


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError("embedding must have positive dimension")
        if not all(np.isfinite(self.values)):
            raise ValueError("embedding values must be finite")

    @property
    def dimension(self) -> int:
        return len(self.values)


def cosine(a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]) -> float:
    va = np.asarray(a.values if isinstance(a, EmbeddingVector) else a, dtype=float)
    vb = np.asarray(b.values if isinstance(b, EmbeddingVector) else b, dtype=float)
    denom = np.linalg.norm(va) * np.linalg.norm(vb)
    if denom == 0:
        return 0.0
    return float(np.dot(va, vb) / denom)


# -- errors --------------------------------------------------------------------

class GatewayError(PolicySimError):
    pass


class ProviderTimeout(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class ScriptMiss(GatewayError):
    pass


class ProviderError(GatewayError):
    """Non-retryable provider failure (bad request, auth, malformed reply)."""


class TransientFault(Exception):
    """Raised by providers for failures worth retrying."""

    def __init__(self, message: str = "", rate_limited: bool = False):
        super().__init__(message)
        self.rate_limited = rate_limited


# -- audit ---------------------------------------------------------------------

def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class AuditLog:
    """Thread-safe record of every provider attempt, optionally mirrored to JSONL."""

    def __init__(self, path: str | Path | None = None):
        self._lock = threading.Lock()
        self.records: list[dict[str, Any]] = []
        self.path = Path(path) if path else None

    def append(self, record: dict[str, Any]) -> None:
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self.records)

    def with_tag(self, prefix: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["tag"].startswith(prefix)]

    def prompts(self, prefix: str = "") -> list[str]:
        return [r["prompt"] for r in self.with_tag(prefix)]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r["provider_id"]] = out.get(r["provider_id"], 0) + 1
        return dict(sorted(out.items()))


# -- providers -----------------------------------------------------------------

class Provider(Protocol):
    provider_id: str

    def complete(self, request: ChatRequest) -> str: ...

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...

    def score(self, request: ChatRequest) -> float: ...


Responder = Union[str, float, Callable[[ChatRequest], Union[str, float]]]


@dataclass
class ScriptEntry:
    """``match(tag, request_text)`` selects the entry; first match wins.

    ``times`` limits how often the entry may fire; exhausted entries are
    skipped, which is how multi-step traces (bad output, then good) are
    scripted.
    """

    match: Callable[[str, str], bool]
    response: Responder
    times: int | None = None
    used: int = 0

    @classmethod
    def on(cls, tag: str | None = None, contains: str | None = None,
           response: Responder = "", times: int | None = None) -> "ScriptEntry":
        def match(t: str, text: str) -> bool:
            if tag is not None and not (t == tag or t.startswith(tag + ".")):
                return False
            return contains is None or contains in text
        return cls(match, response, times)


def hash_embedding(text: str, dim: int = 64) -> list[float]:
    """Unit vector seeded by the text's hash; identical texts map identically."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return list(v / np.linalg.norm(v))


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def bag_of_words_embedding(text: str, dim: int = 256) -> list[float]:
    """Hashed token counts, L2-normalized; texts sharing words land close."""
    v = np.zeros(dim)
    for tok in _TOKEN_RE.findall(text.lower()):
        v[int.from_bytes(hashlib.md5(tok.encode()).digest()[:4], "little") % dim] += 1.0
    n = np.linalg.norm(v)
    if n == 0:
        v[0] = 1.0
        return list(v)
    return list(v / n)


class ScriptedProvider:
    """Deterministic stand-in for a model endpoint."""

    def __init__(self, entries: Iterable[ScriptEntry] = (), provider_id: str = "scripted",
                 embedder: Callable[[str], Sequence[float]] = hash_embedding,
                 embedding_table: Mapping[str, Sequence[float]] | None = None):
        self.entries = list(entries)
        self.provider_id = provider_id
        self.embedder = embedder
        self.embedding_table = dict(embedding_table or {})
        self._lock = threading.Lock()

    def add(self, entry: ScriptEntry) -> "ScriptedProvider":
        self.entries.append(entry)
        return self

    def _answer(self, request: ChatRequest) -> str | float:
        text = request.text()
        with self._lock:
            for entry in self.entries:
                if entry.times is not None and entry.used >= entry.times:
                    continue
                if entry.match(request.tag, text):
                    entry.used += 1
                    chosen = entry
                    break
            else:
                raise ScriptMiss(f"no script entry for tag={request.tag!r} "
                                 f"fingerprint={request.fingerprint()[:12]}")
        resp = chosen.response
        return resp(request) if callable(resp) else resp

    def complete(self, request: ChatRequest) -> str:
        return str(self._answer(request))

    def score(self, request: ChatRequest) -> float:
        value = self._answer(request)
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ProviderError(f"scripted score is not a number: {value!r}") from None

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [list(self.embedding_table[t]) if t in self.embedding_table else list(self.embedder(t))
                for t in texts]


class HttpProvider:
    """OpenAI-compatible HTTP endpoint.

    ``/chat/completions`` and ``/embeddings`` follow the usual schema.  Reward
    scores come from ``POST {endpoint}/score`` with ``{"model", "messages"}``
    returning ``{"score": float}``.
    """

    def __init__(self, endpoint: str, model: str, token_env: str | None = None,
                 timeout: float = 60.0, provider_id: str | None = None, transport=None):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.provider_id = provider_id or model
        headers = {}
        if token_env:
            token = os.environ.get(token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        try:
            r = self._client.post(self.endpoint + path, json=payload)
        except httpx.TimeoutException as exc:
            raise TransientFault(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientFault(f"transport: {exc}") from exc
        if r.status_code == 429:
            raise TransientFault("rate limited", rate_limited=True)
        if r.status_code >= 500:
            raise TransientFault(f"server error {r.status_code}")
        if r.status_code >= 400:
            raise ProviderError(f"{r.status_code}: {r.text[:200]}")
        try:
            return r.json()
        except ValueError as exc:
            raise ProviderError("response is not JSON") from exc

    @staticmethod
    def _messages(request: ChatRequest) -> list[dict]:
        msgs = [{"role": "system", "content": request.system_prompt}] if request.system_prompt else []
        return msgs + [{"role": m.role.value, "content": m.content} for m in request.messages]

    def complete(self, request: ChatRequest) -> str:
        payload: dict[str, Any] = {"model": self.model, "messages": self._messages(request),
                                   "temperature": request.temperature}
        if request.seed is not None:
            payload["seed"] = request.seed
        data = self._post("/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError("unexpected completion payload") from exc

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self.model, "input": list(texts)})
        try:
            return [row["embedding"] for row in data["data"]]
        except (KeyError, TypeError) as exc:
            raise ProviderError("unexpected embedding payload") from exc

    def score(self, request: ChatRequest) -> float:
        data = self._post("/score", {"model": self.model, "messages": self._messages(request)})
        try:
            return float(data["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError("unexpected score payload") from exc


# -- gateway -------------------------------------------------------------------

class Gateway:
    """Retrying, rate-limited, audited access to one provider.

    ``max_attempts`` counts every try including the first; waits between tries
    are ``backoff * 2**(attempt-1)`` seconds.
    """

    def __init__(self, provider: Provider, *, audit: AuditLog | None = None,
                 max_attempts: int = 3, backoff: float = 1.0, max_in_flight: int = 5,
                 sleep: Callable[[float], None] = time.sleep):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.provider = provider
        self.audit = audit if audit is not None else AuditLog()
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep

    @property
    def provider_id(self) -> str:
        return self.provider.provider_id

    def _call(self, op: str, tag: str, prompt: str, fn: Callable[[], Any]) -> Any:
        last: TransientFault | None = None
        for attempt in range(1, self.max_attempts + 1):
            record: dict[str, Any] = {
                "op": op, "tag": tag, "provider_id": self.provider_id, "attempt": attempt,
                "request_hash": _sha(prompt), "timestamp": time.time(), "prompt": prompt,
            }
            t0 = time.perf_counter()
            try:
                with self._slots:
                    result = fn()
            except TransientFault as exc:
                record.update(ok=False, error=str(exc) or "transient fault")
                self.audit.append(record)
                last = exc
                if attempt < self.max_attempts:
                    self._sleep(self.backoff * 2 ** (attempt - 1))
                continue
            except GatewayError as exc:
                record.update(ok=False, error=f"{type(exc).__name__}: {exc}")
                self.audit.append(record)
                raise
            record.update(ok=True, response_hash=_sha(repr(result)),
                          latency_ms=int((time.perf_counter() - t0) * 1000))
            self.audit.append(record)
            return result
        assert last is not None
        if last.rate_limited:
            raise RateLimited(f"{self.provider_id}: rate limited after {self.max_attempts} attempts")
        raise ProviderTimeout(f"{self.provider_id}: failed after {self.max_attempts} attempts: {last}")

    def complete(self, request: ChatRequest) -> ChatResponse:
        t0 = time.perf_counter()
        content = self._call("complete", request.tag, request.text(),
                             lambda: self.provider.complete(request))
        if not content:
            log.warning("empty completion from %s for tag %s", self.provider_id, request.tag)
        return ChatResponse(content, self.provider_id, int((time.perf_counter() - t0) * 1000))

    def embed(self, texts: Sequence[str], tag: str = "embed") -> list[EmbeddingVector]:
        texts = list(texts)
        if not texts:
            raise ValueError("embed needs at least one text")
        rows = self._call("embed", tag, "\x1e".join(texts), lambda: self.provider.embed(texts))
        vectors = [EmbeddingVector(tuple(float(x) for x in row)) for row in rows]
        if len(vectors) != len(texts) or len({v.dimension for v in vectors}) != 1:
            raise ProviderError("embedding provider returned inconsistent vectors")
        return vectors

    def score(self, request: ChatRequest) -> float:
        return self._call("score", request.tag, request.text(), lambda: self.provider.score(request))
