"""Model access layer: chat completions, embeddings, retries, transcripts.

Every model interaction in the pipeline goes through :class:`ModelGateway`.
The gateway renders a prompt template, dispatches it to a backend, retries
transient transport failures with exponential backoff, and records the
exchange in an append-only transcript.  It never interprets or mutates
model output; parsing belongs to the consuming modules.

Two backend families exist:

* Scripted mocks (:class:`MockScriptBackend`, :class:`MockEmbedder`) make
  every stage runnable and byte-for-byte reproducible without live models.
* HTTP backends speak a chat-completions style API with a bearer token
  taken from the environment.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import (
    DimensionMismatch,
    ProtocolError,
    ScriptMiss,
    ScriptParseError,
    TemplateError,
    TransportError,
)
from .templates import PromptTemplate, get_template

logger = logging.getLogger(__name__)

_HEX_DIGEST = re.compile(r"^[0-9a-f]{64}$")
# Separator for multi-part aliases in mock scripts: every part must occur
# as a substring of the rendered prompt for the entry to match.
ALIAS_SEPARATOR = " && "


def prompt_digest(rendered: str) -> str:
    """SHA-256 hex digest of a fully rendered prompt."""
    return hashlib.sha256(rendered.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion request before rendering."""

    template_id: str
    variables: dict[str, str] = field(default_factory=dict)
    attachments: tuple[str, ...] = ()
    max_attempts: int = 3

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise TemplateError("max_attempts must be >= 1")
        object.__setattr__(self, "attachments", tuple(self.attachments))


@dataclass(frozen=True)
class ModelExchange:
    """A completed request/response pair, as recorded in the transcript."""

    template_id: str
    rendered_prompt: str
    raw_response: str
    attempt: int
    backend_id: str
    latency_ms: int

    def stable_fields(self) -> tuple[str, str, str, int]:
        """The fields that participate in transcript hashing.

        Latency is wall-clock and therefore excluded.
        """
        return (self.template_id, self.rendered_prompt, self.raw_response, self.attempt)


@dataclass(frozen=True)
class EmbeddingVector:
    """A unit-norm embedding."""

    values: tuple[float, ...]
    norm_kind: str = "unit"

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise DimensionMismatch("embedding must be a non-empty 1-d vector")
        norm = float(np.linalg.norm(arr))
        if abs(norm - 1.0) > 1e-6:
            raise DimensionMismatch(f"embedding norm {norm:.8f} is not unit")

    @property
    def dimension(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @classmethod
    def from_raw(cls, raw: Sequence[float]) -> "EmbeddingVector":
        """Normalize a raw vector to unit length and wrap it."""
        arr = np.asarray(raw, dtype=float)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise DimensionMismatch("cannot normalize a zero vector")
        return cls(values=tuple((arr / norm).tolist()))


@runtime_checkable
class ChatBackend(Protocol):
    backend_id: str

    def complete(
        self, template: PromptTemplate, rendered: str, attachments: Sequence[str]
    ) -> str: ...


@runtime_checkable
class EmbeddingBackend(Protocol):
    backend_id: str

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


@dataclass
class _ScriptEntry:
    template_id: str
    match: str
    response: str
    fail: int = 0
    consumed: bool = False

    @property
    def is_digest(self) -> bool:
        return bool(_HEX_DIGEST.match(self.match))

    def matches(self, rendered: str, digest: str) -> bool:
        if self.is_digest:
            return self.match == digest
        if self.match == "":
            return True
        parts = self.match.split(ALIAS_SEPARATOR)
        return all(part in rendered for part in parts)


class MockScriptBackend:
    """Deterministic chat backend driven by a JSONL script.

    Each script line is an object with keys ``template_id``, ``match`` and
    ``response``.  ``match`` is either the SHA-256 hex digest of the fully
    rendered prompt or a human-readable alias; an alias matches when every
    ``" && "``-separated part occurs as a substring of the rendered prompt
    (an empty alias matches anything, useful as a catch-all placed last).

    Entries are consumed first-to-last: a lookup takes the first unconsumed
    matching entry, so several entries with the same key script successive
    calls (re-prompts, repeated generation).  Once all matching entries are
    consumed, the last one keeps answering, which keeps long loops stable.

    An optional integer field ``fail`` makes the entry raise
    :class:`TransportError` that many times before responding, to exercise
    the gateway's retry path.
    """

    backend_id = "mock-script"

    def __init__(self, entries: Sequence[dict]) -> None:
        self._entries: list[_ScriptEntry] = []
        for idx, obj in enumerate(entries):
            if not isinstance(obj, dict):
                raise ScriptParseError(f"script entry {idx} is not an object")
            try:
                entry = _ScriptEntry(
                    template_id=obj["template_id"],
                    match=obj["match"],
                    response=obj["response"],
                    fail=int(obj.get("fail", 0)),
                )
            except KeyError as exc:
                raise ScriptParseError(
                    f"script entry {idx} is missing key {exc.args[0]!r}"
                ) from None
            if not isinstance(entry.template_id, str) or not isinstance(
                entry.match, str
            ) or not isinstance(entry.response, str):
                raise ScriptParseError(f"script entry {idx} has non-string fields")
            self._entries.append(entry)
        self.misses: list[tuple[str, str]] = []

    def complete(
        self, template: PromptTemplate, rendered: str, attachments: Sequence[str]
    ) -> str:
        digest = prompt_digest(rendered)
        candidates = [
            e
            for e in self._entries
            if e.template_id == template.template_id and e.matches(rendered, digest)
        ]
        # Prefer digest entries over aliases, then unconsumed over consumed.
        for exact_first in (True, False):
            pool = [e for e in candidates if e.is_digest is exact_first]
            for entry in pool:
                if not entry.consumed:
                    return self._serve(entry)
        if candidates:
            return self._serve(candidates[-1], reuse=True)
        self.misses.append((template.template_id, rendered))
        raise ScriptMiss(
            f"no script entry for template {template.template_id!r} "
            f"(digest {digest[:12]}..., prompt head {rendered[:80]!r})"
        )

    def _serve(self, entry: _ScriptEntry, reuse: bool = False) -> str:
        if entry.fail > 0:
            entry.fail -= 1
            raise TransportError(
                f"scripted transient failure for template {entry.template_id!r}"
            )
        if not reuse:
            entry.consumed = True
        return entry.response


def load_mock_script(path: str | Path) -> MockScriptBackend:
    """Parse a JSONL mock script into a backend.

    Raises :class:`ScriptParseError` on any malformed line.
    """
    entries = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ScriptParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return MockScriptBackend(entries)


class MockEmbedder:
    """Seeded, deterministic embedder.

    A text is tokenized to lowercase alphanumeric words; each token maps to
    a fixed pseudo-random vector derived from SHA-256 of ``seed:token``,
    and the text embedding is the unit-normalized sum of its token vectors.
    Texts that share vocabulary therefore land near each other, which gives
    scripted runs meaningful retrieval and clustering behaviour while
    staying fully reproducible across platforms.
    """

    backend_id = "mock-embedder"
    _token_re = re.compile(r"[a-z0-9]+")

    def __init__(self, seed: int = 0, dimension: int = 32) -> None:
        if dimension < 2:
            raise DimensionMismatch("mock embedder dimension must be >= 2")
        self.seed = seed
        self.dimension = dimension
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        out = np.empty(self.dimension, dtype=float)
        pos = 0
        block = 0
        while pos < self.dimension:
            digest = hashlib.sha256(
                f"{self.seed}:{token}:{block}".encode("utf-8")
            ).digest()
            for off in range(0, 32, 8):
                if pos >= self.dimension:
                    break
                val = int.from_bytes(digest[off : off + 8], "big")
                out[pos] = val / 2**63 - 1.0
                pos += 1
            block += 1
        self._token_cache[token] = out
        return out

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        vectors = []
        for text in texts:
            tokens = self._token_re.findall(text.lower())
            if not tokens:
                tokens = [text or "<empty>"]
            acc = np.zeros(self.dimension, dtype=float)
            for token in tokens:
                acc += self._token_vector(token)
            norm = float(np.linalg.norm(acc))
            if norm == 0.0:
                acc = self._token_vector("<null>").copy()
                norm = float(np.linalg.norm(acc))
            vectors.append(acc / norm)
        return vectors


class _TokenBucket:
    """Minimal concurrency limiter for outbound HTTP calls."""

    def __init__(self, capacity: int) -> None:
        self._sem = threading.BoundedSemaphore(max(1, capacity))

    def __enter__(self) -> "_TokenBucket":
        self._sem.acquire()
        return self

    def __exit__(self, *exc: object) -> None:
        self._sem.release()


def _encode_attachment(path: str) -> dict:
    mime = mimetypes.guess_type(path)[0] or "application/octet-stream"
    data = base64.b64encode(Path(path).read_bytes()).decode("ascii")
    return {
        "type": "image_url",
        "image_url": {"url": f"data:{mime};base64,{data}"},
    }


class HttpChatBackend:
    """Chat-completions style HTTP backend.

    Sends ``POST {base_url}/chat/completions`` with a bearer token read
    from ``api_key``.  Image attachments are inlined as base64 data URLs.
    Network and HTTP-status failures surface as :class:`TransportError`
    so the gateway's retry loop can handle them.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str,
        timeout: float = 120.0,
        max_inflight: int = 4,
    ) -> None:
        self.backend_id = f"http:{model}"
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self._bucket = _TokenBucket(max_inflight)

    def complete(
        self, template: PromptTemplate, rendered: str, attachments: Sequence[str]
    ) -> str:
        import requests

        content: list[dict] | str
        if attachments:
            content = [{"type": "text", "text": rendered}]
            content.extend(_encode_attachment(p) for p in attachments)
        else:
            content = rendered
        payload = {
            "model": self.model,
            "temperature": template.temperature,
            "messages": [{"role": "user", "content": content}],
        }
        try:
            with self._bucket:
                resp = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers={"Authorization": f"Bearer {self.api_key}"},
                    timeout=self.timeout,
                )
        except requests.RequestException as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"chat request returned HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise ProtocolError(f"malformed chat completion payload: {exc}") from exc


class HttpEmbedder:
    """Embeddings endpoint client; normalizes vectors to unit length."""

    def __init__(
        self, base_url: str, model: str, api_key: str, timeout: float = 120.0
    ) -> None:
        self.backend_id = f"http-embed:{model}"
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        import requests

        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"embedding request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"embedding request returned HTTP {resp.status_code}")
        rows = resp.json()["data"]
        out = []
        for row in rows:
            arr = np.asarray(row["embedding"], dtype=float)
            norm = float(np.linalg.norm(arr))
            if norm == 0.0:
                raise DimensionMismatch("embedding endpoint returned a zero vector")
            out.append(arr / norm)
        return out


class ModelGateway:
    """Single entry point for chat completions and embeddings.

    Responsibilities: template rendering, attachment/modality validation,
    retry with exponential backoff on :class:`TransportError`, transcript
    recording, and embedding dimension consistency.  Nothing here inspects
    response content.
    """

    def __init__(
        self,
        chat_backend: ChatBackend,
        embedding_backend: EmbeddingBackend,
        backoff_base: float = 0.1,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        self.chat_backend = chat_backend
        self.embedding_backend = embedding_backend
        self.backoff_base = backoff_base
        self._sleep = sleeper
        self.exchanges: list[ModelExchange] = []
        self.calls_by_template: Counter[str] = Counter()
        self._dimension: int | None = None

    # -- chat ---------------------------------------------------------

    def complete(self, request: ChatRequest) -> ModelExchange:
        """Render, dispatch, retry transient failures, record, return."""
        template = get_template(request.template_id)
        if request.attachments and not template.multimodal:
            raise TemplateError(
                f"template {request.template_id!r} does not accept attachments"
            )
        rendered = template.render(request.variables)
        started = time.monotonic()
        attempt = 0
        while True:
            attempt += 1
            try:
                raw = self.chat_backend.complete(
                    template, rendered, request.attachments
                )
                break
            except TransportError:
                if attempt >= request.max_attempts:
                    raise
                delay = self.backoff_base * (2 ** (attempt - 1))
                logger.warning(
                    "transient failure on %s (attempt %d/%d); retrying in %.2fs",
                    request.template_id,
                    attempt,
                    request.max_attempts,
                    delay,
                )
                if delay > 0:
                    self._sleep(delay)
        exchange = ModelExchange(
            template_id=request.template_id,
            rendered_prompt=rendered,
            raw_response=raw,
            attempt=attempt,
            backend_id=self.chat_backend.backend_id,
            latency_ms=max(0, int((time.monotonic() - started) * 1000)),
        )
        self.exchanges.append(exchange)
        self.calls_by_template[request.template_id] += 1
        return exchange

    # -- embeddings ---------------------------------------------------

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        """Embed texts; enforces one embedding dimension per gateway life."""
        if not texts:
            return []
        raw = self.embedding_backend.embed(texts)
        out = []
        for arr in raw:
            vec = EmbeddingVector.from_raw(arr)
            if self._dimension is None:
                self._dimension = vec.dimension
            elif vec.dimension != self._dimension:
                raise DimensionMismatch(
                    f"embedding dimension changed mid-run: "
                    f"{vec.dimension} != {self._dimension}"
                )
            out.append(vec)
        return out

    def embed_one(self, text: str) -> EmbeddingVector:
        return self.embed([text])[0]

    # -- transcript ---------------------------------------------------

    def transcript_hash(self) -> str:
        """Digest over the deterministic fields of every exchange."""
        h = hashlib.sha256()
        for ex in self.exchanges:
            h.update(
                json.dumps(ex.stable_fields(), ensure_ascii=False, sort_keys=False)
                .encode("utf-8")
            )
            h.update(b"\x00")
        return h.hexdigest()

    def save_transcript(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, ex in enumerate(self.exchanges):
                fh.write(
                    json.dumps(
                        {
                            "index": i,
                            "template_id": ex.template_id,
                            "prompt_sha256": prompt_digest(ex.rendered_prompt),
                            "prompt": ex.rendered_prompt,
                            "response": ex.raw_response,
                            "attempt": ex.attempt,
                            "backend_id": ex.backend_id,
                            "latency_ms": ex.latency_ms,
                        },
                        ensure_ascii=False,
                        sort_keys=True,
                    )
                    + "\n"
                )


def complete_with_retry_parse(
    gateway: ModelGateway, request: ChatRequest, parser: Callable[[str], object]
):
    """Call, parse, and on ProtocolError re-prompt exactly once.

    Returns ``(parsed_value, reprompted)``.  If the re-prompted response is
    still malformed the ProtocolError propagates; the caller applies its
    own declared fallback.
    """
    exchange = gateway.complete(request)
    try:
        return parser(exchange.raw_response), False
    except ProtocolError as first_error:
        logger.info(
            "malformed %s response (%s); re-prompting once",
            request.template_id,
            first_error,
        )
        retry = gateway.complete(request)
        return parser(retry.raw_response), True
