"""Uniform chat interface over remote, scripted and cached backends.

Backends implement ``complete(request) -> ChatReply`` and raise
:class:`TransportError` for retryable failures or :class:`ProtocolError`
for unusable payloads. :class:`Gateway` adds retries, the write-through
reply cache and the empty-completion check on top.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

from ._fsutil import atomic_write_text, safe_name
from .core import Message, RetryPolicy, Speaker, normalize_role
from .errors import (
    GatewayUnavailable,
    IncompatibleTranscriptError,
    ProtocolError,
    TranscriptError,
    TransportError,
    UnscriptedCallError,
    ValidationError,
)

logger = logging.getLogger(__name__)

CACHE_FORMAT = "kamac-cache"
CACHE_VERSION = 1
SCRIPT_FORMAT = "kamac-script"


class Phase(str, Enum):
    RECRUIT_INITIAL = "recruit_initial"
    ASSESS = "assess"
    INTERACT = "interact"
    KG_DETECT = "kg_detect"
    RECRUIT_MORE = "recruit_more"
    UPDATE = "update"
    MODERATE = "moderate"


@dataclass(frozen=True)
class CacheKey:
    case_id: str
    role: str
    phase: Phase
    round: int
    sequence_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase", Phase(self.phase))

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "role": self.role,
            "phase": self.phase.value,
            "round": self.round,
            "sequence_index": self.sequence_index,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CacheKey":
        return cls(data["case_id"], data["role"], Phase(data["phase"]), int(data["round"]), int(data["sequence_index"]))


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    temperature: float
    messages: tuple[Message, ...]
    tag: CacheKey
    attachments: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "attachments", tuple(self.attachments))
        if not self.messages:
            raise ValidationError("a chat request needs at least one message")
        if any(m.speaker is Speaker.SYSTEM for m in self.messages[1:]):
            raise ValidationError("the system prompt must be the first message")

    def digest(self) -> str:
        payload = {
            "model": self.model_id,
            "temperature": self.temperature,
            "messages": [m.to_dict() for m in self.messages],
            "attachments": list(self.attachments),
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class ChatReply:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0
    cached: bool = False
    attempts: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "content": self.content,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "latency": self.latency,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ChatReply":
        return cls(
            content=data["content"],
            prompt_tokens=int(data.get("prompt_tokens", 0)),
            completion_tokens=int(data.get("completion_tokens", 0)),
            latency=float(data.get("latency", 0.0)),
        )


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatReply: ...


def synthetic_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


# --------------------------------------------------------------------------
# scripted backend


@dataclass
class ScriptRule:
    """Canned replies for requests whose tag matches every field that is set.

    ``replies`` are served in order per case; the last one repeats. An item may
    be a ``{"error": "transport" | "protocol"}`` mapping to raise instead.
    """

    replies: list[Any]
    phase: Phase | None = None
    round: int | None = None
    role: str | None = None
    case_id: str | None = None

    def matches(self, key: CacheKey) -> bool:
        if self.phase is not None and self.phase is not key.phase:
            return False
        if self.round is not None and self.round != key.round:
            return False
        if self.case_id is not None and self.case_id != key.case_id:
            return False
        if self.role is not None and normalize_role(self.role) != normalize_role(key.role):
            return False
        return True

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptRule":
        if "reply" in data:
            replies = [data["reply"]]
        elif "replies" in data:
            replies = list(data["replies"])
        else:
            raise ValidationError(f"script rule needs 'reply' or 'replies': {dict(data)}")
        if not replies:
            raise ValidationError("script rule has an empty reply list")
        return cls(
            replies=replies,
            phase=Phase(data["phase"]) if data.get("phase") is not None else None,
            round=int(data["round"]) if data.get("round") is not None else None,
            role=data.get("role"),
            case_id=data.get("case_id"),
        )


class ScriptedBackend:
    """Deterministic test double.

    Either a list of :class:`ScriptRule` (first match wins) or a ``responder``
    callable mapping a request to reply text. Token counts are synthetic:
    ``ceil(chars / 4)`` for the prompt and the completion.
    """

    def __init__(self, rules: Sequence[ScriptRule] = (), responder: Callable[[ChatRequest], str] | None = None):
        self.rules = list(rules)
        self.responder = responder
        self.calls: list[ChatRequest] = []
        self._served: dict[tuple[int, str], int] = defaultdict(int)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, Mapping):
            if data.get("format", SCRIPT_FORMAT) != SCRIPT_FORMAT:
                raise ValidationError(f"{path}: not a {SCRIPT_FORMAT} document")
            rules = data.get("rules", [])
        else:
            rules = data
        return cls([ScriptRule.from_dict(r) for r in rules])

    def complete(self, request: ChatRequest) -> ChatReply:
        with self._lock:
            self.calls.append(request)
            text = self._lookup(request)
        prompt_chars = sum(len(m.content) for m in request.messages)
        return ChatReply(
            content=text,
            prompt_tokens=math.ceil(prompt_chars / 4),
            completion_tokens=synthetic_tokens(text),
        )

    def _lookup(self, request: ChatRequest) -> str:
        key = request.tag
        for idx, rule in enumerate(self.rules):
            if not rule.matches(key):
                continue
            n = self._served[(idx, key.case_id)]
            self._served[(idx, key.case_id)] = n + 1
            item = rule.replies[min(n, len(rule.replies) - 1)]
            if isinstance(item, Mapping):
                kind = item.get("error", "transport")
                if kind == "protocol":
                    raise ProtocolError(f"scripted protocol error for {key.to_dict()}")
                raise TransportError(f"scripted transport error for {key.to_dict()}")
            return str(item)
        if self.responder is not None:
            return self.responder(request)
        raise UnscriptedCallError(f"no script entry for {key.to_dict()}")


# --------------------------------------------------------------------------
# remote backend

_WIRE_ROLE = {Speaker.SYSTEM: "system", Speaker.USER: "user", Speaker.AGENT: "assistant", Speaker.MODERATOR: "assistant"}


class RemoteBackend:
    """Client for a chat-completions compatible HTTP endpoint."""

    DEFAULT_BASE_URL = "https://api.openai.com/v1"

    def __init__(self, api_key: str, base_url: str = DEFAULT_BASE_URL, timeout: float = 60.0, client: Any = None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}

    def payload(self, request: ChatRequest) -> dict[str, Any]:
        messages: list[dict[str, Any]] = [{"role": _WIRE_ROLE[m.speaker], "content": m.content} for m in request.messages]
        if request.attachments:
            last_user = max(i for i, m in enumerate(request.messages) if m.speaker is Speaker.USER)
            parts: list[dict[str, Any]] = [{"type": "text", "text": messages[last_user]["content"]}]
            parts += [{"type": "image_url", "image_url": {"url": ref}} for ref in request.attachments]
            messages[last_user]["content"] = parts
        return {"model": request.model_id, "temperature": request.temperature, "messages": messages}

    def complete(self, request: ChatRequest) -> ChatReply:
        httpx = self._httpx
        start = time.perf_counter()
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=self.payload(request), headers=self._headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"transport failure: {exc}") from exc
        latency = time.perf_counter() - start
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"backend returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProtocolError(f"backend rejected the request: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
            usage = data.get("usage") or {}
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion payload: {exc!r}") from exc
        if content is None:
            content = ""
        if not isinstance(content, str):
            raise ProtocolError("completion content is not text")
        return ChatReply(
            content=content,
            prompt_tokens=int(usage.get("prompt_tokens") or 0),
            completion_tokens=int(usage.get("completion_tokens") or 0),
            latency=latency,
        )


# --------------------------------------------------------------------------
# retries


def with_retries(
    backend: Backend,
    request: ChatRequest,
    policy: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
) -> ChatReply:
    last: BaseException | None = None
    for attempt in range(1, policy.max_attempts + 1):
        try:
            reply = backend.complete(request)
        except TransportError as exc:
            last = exc
            logger.warning("attempt %d/%d failed for %s: %s", attempt, policy.max_attempts, request.tag.to_dict(), exc)
            if attempt < policy.max_attempts:
                sleep(policy.delay(attempt))
            continue
        return replace(reply, attempts=attempt)
    raise GatewayUnavailable(f"backend unavailable after {policy.max_attempts} attempts: {last}", cause=last, attempts=policy.max_attempts)


# --------------------------------------------------------------------------
# reply cache


class ReplyCache:
    """One JSON document per case: ordered ``(CacheKey, digest, reply)`` records."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._docs: dict[str, dict[tuple, tuple[str, ChatReply]]] = {}
        self._records: dict[str, list[dict[str, Any]]] = {}
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()

    def path_for(self, case_id: str) -> Path:
        return self.root / f"{safe_name(case_id)}.cache.json"

    def _lock(self, case_id: str) -> threading.Lock:
        with self._guard:
            return self._locks[case_id]

    @staticmethod
    def _ident(key: CacheKey) -> tuple:
        return (key.case_id, normalize_role(key.role), key.phase.value, key.round, key.sequence_index)

    def _load(self, case_id: str) -> None:
        if case_id in self._docs:
            return
        index: dict[tuple, tuple[str, ChatReply]] = {}
        records: list[dict[str, Any]] = []
        path = self.path_for(case_id)
        if path.exists():
            try:
                doc = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise TranscriptError(f"corrupt cache document {path}: {exc}") from exc
            if doc.get("format") != CACHE_FORMAT or doc.get("version") != CACHE_VERSION:
                raise IncompatibleTranscriptError(
                    f"{path}: expected {CACHE_FORMAT} v{CACHE_VERSION}, found {doc.get('format')} v{doc.get('version')}"
                )
            records = list(doc["records"])
            for rec in records:
                key = CacheKey.from_dict(rec["key"])
                index[self._ident(key)] = (rec["digest"], ChatReply.from_dict(rec["reply"]))
        self._docs[case_id] = index
        self._records[case_id] = records

    def get(self, key: CacheKey) -> tuple[str, ChatReply] | None:
        with self._lock(key.case_id):
            self._load(key.case_id)
            return self._docs[key.case_id].get(self._ident(key))

    def put(self, key: CacheKey, digest: str, reply: ChatReply) -> None:
        with self._lock(key.case_id):
            self._load(key.case_id)
            self._docs[key.case_id][self._ident(key)] = (digest, reply)
            self._records[key.case_id].append({"key": key.to_dict(), "digest": digest, "reply": reply.to_dict()})
            doc = {
                "format": CACHE_FORMAT,
                "version": CACHE_VERSION,
                "case_id": key.case_id,
                "records": self._records[key.case_id],
            }
            atomic_write_text(self.path_for(key.case_id), json.dumps(doc, indent=1, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# gateway


@dataclass
class Gateway:
    backend: Backend
    cache: ReplyCache | None = None
    retry_policy: RetryPolicy = field(default_factory=RetryPolicy)
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self.live_calls = 0
        self.cache_hits = 0

    def chat(self, request: ChatRequest) -> ChatReply:
        digest = request.digest()
        if self.cache is not None:
            hit = self.cache.get(request.tag)
            if hit is not None:
                old_digest, reply = hit
                if old_digest != digest:
                    logger.warning("prompt drift for %s: cached digest %s != %s", request.tag.to_dict(), old_digest[:12], digest[:12])
                with self._lock:
                    self.cache_hits += 1
                return replace(reply, cached=True, attempts=0)
        reply = with_retries(self.backend, request, self.retry_policy, self.sleep)
        with self._lock:
            self.live_calls += 1
        if not reply.content.strip():
            raise ProtocolError(f"empty completion for {request.tag.to_dict()}")
        if self.cache is not None:
            self.cache.put(request.tag, digest, reply)
        return reply
