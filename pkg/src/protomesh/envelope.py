"""Unified transport envelope, its validation, and the normalized error taxonomy."""

from __future__ import annotations

import asyncio
import json
import random
import time
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping

PROTOCOLS = ("a2a", "acp", "anp", "agora")

DEFAULT_TTL_MS = 30000


class ErrorCode(str, Enum):
    E_TIMEOUT = "E_TIMEOUT"
    E_HTTP = "E_HTTP"
    E_CONN = "E_CONN"
    E_PROTOCOL = "E_PROTOCOL"
    E_ENCODE = "E_ENCODE"
    E_DECODE = "E_DECODE"
    E_UNSUPPORTED = "E_UNSUPPORTED"


@dataclass(frozen=True)
class ErrorKind:
    kind: ErrorCode
    detail: str = ""
    http_status: int | None = None

    def __post_init__(self) -> None:
        if (self.kind is ErrorCode.E_HTTP) != (self.http_status is not None):
            raise ValueError("http_status is present iff kind is E_HTTP")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "detail": self.detail, "http_status": self.http_status}


class ProtocolError(Exception):
    """Raised by the adapter layer; carries a normalized :class:`ErrorKind`."""

    def __init__(self, error: ErrorKind):
        super().__init__(f"{error.kind.value}: {error.detail}")
        self.error = error

    @property
    def kind(self) -> ErrorCode:
        return self.error.kind

    @classmethod
    def of(cls, kind: ErrorCode, detail: str = "", http_status: int | None = None) -> "ProtocolError":
        return cls(ErrorKind(kind, detail, http_status))


class IdFactory:
    """UUID-v4 formatted identifiers drawn from a seedable RNG."""

    def __init__(self, seed: int | None = None):
        self._rng = random.Random(seed)

    def __call__(self) -> str:
        return str(uuid.UUID(int=self._rng.getrandbits(128), version=4))


_default_ids = IdFactory()


@dataclass(frozen=True)
class EnvelopeContext:
    trace_id: str = ""
    parent_id: str = ""
    idempotency_key: str = ""
    session_id: str = ""
    priority: int = 0
    ttl_ms: int = DEFAULT_TTL_MS
    stream: bool = False
    artifact_refs: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "parent_id": self.parent_id,
            "idempotency_key": self.idempotency_key,
            "session_id": self.session_id,
            "priority": self.priority,
            "ttl_ms": self.ttl_ms,
            "stream": self.stream,
            "artifact_refs": list(self.artifact_refs),
            "tags": list(self.tags),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "EnvelopeContext":
        return cls(
            trace_id=doc.get("trace_id", ""),
            parent_id=doc.get("parent_id", ""),
            idempotency_key=doc.get("idempotency_key", ""),
            session_id=doc.get("session_id", ""),
            priority=doc.get("priority", 0),
            ttl_ms=doc.get("ttl_ms", DEFAULT_TTL_MS),
            stream=bool(doc.get("stream", False)),
            artifact_refs=tuple(doc.get("artifact_refs", ())),
            tags=tuple(doc.get("tags", ())),
        )


@dataclass(frozen=True)
class EnvelopeMeta:
    protocol_hint: str | None = None
    retry_count: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"protocol_hint": self.protocol_hint, "retry_count": self.retry_count}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "EnvelopeMeta":
        return cls(protocol_hint=doc.get("protocol_hint"), retry_count=doc.get("retry_count", 0))


@dataclass(frozen=True)
class Envelope:
    id: str
    ts: float
    src: str
    dst: str
    content: dict[str, Any]
    intent: str = ""
    context: EnvelopeContext = field(default_factory=EnvelopeContext)
    meta: EnvelopeMeta = field(default_factory=EnvelopeMeta)

    def to_dict(self) -> dict[str, Any]:
        """Canonical document form; key order follows the reference layout."""
        return {
            "id": self.id,
            "ts": self.ts,
            "src": self.src,
            "dst": self.dst,
            "intent": self.intent,
            "content": self.content,
            "context": self.context.to_dict(),
            "meta": self.meta.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Envelope":
        return cls(
            id=doc["id"],
            ts=doc["ts"],
            src=doc["src"],
            dst=doc["dst"],
            intent=doc.get("intent", ""),
            content=doc["content"],
            context=EnvelopeContext.from_dict(doc.get("context", {})),
            meta=EnvelopeMeta.from_dict(doc.get("meta", {})),
        )

    def to_json(self) -> bytes:
        return dumps(self.to_dict())

    def with_context(self, **changes: Any) -> "Envelope":
        return replace(self, context=replace(self.context, **changes))

    def with_meta(self, **changes: Any) -> "Envelope":
        return replace(self, meta=replace(self.meta, **changes))


def dumps(doc: Any) -> bytes:
    """Compact UTF-8 JSON used for every wire document."""
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


_CONTEXT_KEYS = {
    "trace_id", "parent_id", "idempotency_key", "session_id",
    "priority", "ttl_ms", "stream", "artifact_refs", "tags",
}
_META_KEYS = {"protocol_hint", "retry_count"}


def new_envelope(
    src: str,
    dst: str,
    content: Mapping[str, Any],
    *,
    intent: str = "",
    ids: Callable[[], str] | None = None,
    clock: Callable[[], float] | None = None,
    **options: Any,
) -> Envelope:
    """Build an envelope with a fresh id and default context.

    ``options`` may hold any context or meta field by name. Missing trace and
    idempotency identifiers are generated.
    """
    if not src or not dst:
        raise ValueError("src and dst must be non-empty")
    if content is None:
        raise ValueError("content must not be None")
    unknown = set(options) - _CONTEXT_KEYS - _META_KEYS
    if unknown:
        raise TypeError(f"unknown envelope options: {sorted(unknown)}")
    ids = ids or _default_ids
    clock = clock or time.time
    ctx = {k: v for k, v in options.items() if k in _CONTEXT_KEYS}
    ctx.setdefault("trace_id", ids())
    ctx.setdefault("idempotency_key", ids())
    for key in ("artifact_refs", "tags"):
        if key in ctx:
            ctx[key] = tuple(ctx[key])
    meta = {k: v for k, v in options.items() if k in _META_KEYS}
    return Envelope(
        id=ids(),
        ts=clock(),
        src=src,
        dst=dst,
        intent=intent,
        content=dict(content),
        context=EnvelopeContext(**ctx),
        meta=EnvelopeMeta(**meta),
    )


def validate(e: Envelope, max_retries: int | None = None) -> list[str]:
    """Return the list of violated envelope rules; empty means valid."""
    violations = []
    if not e.id:
        violations.append("id missing")
    if not e.src:
        violations.append("src missing")
    if not e.dst:
        violations.append("dst missing")
    if e.content is None or not isinstance(e.content, dict):
        violations.append("content missing")
    if e.context is None:
        violations.append("context missing")
        return violations
    if not isinstance(e.context.priority, int) or isinstance(e.context.priority, bool):
        violations.append("priority not integer")
    if not isinstance(e.context.ttl_ms, int) or isinstance(e.context.ttl_ms, bool):
        violations.append("ttl_ms not integer")
    elif e.context.ttl_ms < 0:
        violations.append("ttl_ms negative")
    if not e.context.idempotency_key:
        violations.append("idempotency_key missing")
    if e.meta.protocol_hint is not None and e.meta.protocol_hint not in PROTOCOLS:
        violations.append("protocol_hint invalid")
    if e.meta.retry_count < 0:
        violations.append("retry_count negative")
    elif max_retries is not None and e.meta.retry_count > max_retries:
        violations.append("retry_count exceeds max_retries")
    return violations


# Transport failure categories emitted by the network layer.
_CATEGORY_TO_KIND = {
    "timeout": ErrorCode.E_TIMEOUT,
    "http_status": ErrorCode.E_HTTP,
    "connection": ErrorCode.E_CONN,
    "handshake": ErrorCode.E_CONN,
    "identity": ErrorCode.E_CONN,
    "protocol": ErrorCode.E_PROTOCOL,
    "encode": ErrorCode.E_ENCODE,
    "decode": ErrorCode.E_DECODE,
    "unsupported": ErrorCode.E_UNSUPPORTED,
}


def normalize_error(raw: Any) -> ErrorKind:
    """Map a transport/codec failure to an :class:`ErrorKind`.

    ``raw`` is either a mapping ``{"category", "status"?, "detail"?}`` or an
    exception instance. Unknown categories become ``E_PROTOCOL`` with the
    detail preserved.
    """
    if isinstance(raw, ProtocolError):
        return raw.error
    if isinstance(raw, BaseException):
        return _normalize_exception(raw)
    category = raw.get("category")
    detail = str(raw.get("detail", ""))
    status = raw.get("status")
    if status is not None and category in (None, "http_status"):
        return ErrorKind(ErrorCode.E_HTTP, detail or f"HTTP {status}", int(status))
    kind = _CATEGORY_TO_KIND.get(category)
    if kind is None:
        return ErrorKind(ErrorCode.E_PROTOCOL, detail or f"unmapped category {category!r}")
    if kind is ErrorCode.E_HTTP:
        return ErrorKind(ErrorCode.E_PROTOCOL, detail or "http_status without status")
    return ErrorKind(kind, detail)


def _normalize_exception(exc: BaseException) -> ErrorKind:
    detail = f"{type(exc).__name__}: {exc}"
    if isinstance(exc, (asyncio.TimeoutError, TimeoutError)):
        return ErrorKind(ErrorCode.E_TIMEOUT, detail)
    if isinstance(exc, json.JSONDecodeError) or isinstance(exc, UnicodeDecodeError):
        return ErrorKind(ErrorCode.E_DECODE, detail)
    if isinstance(exc, (ConnectionError, OSError)):
        return ErrorKind(ErrorCode.E_CONN, detail)
    if isinstance(exc, (TypeError, ValueError)) and "serializable" in str(exc):
        return ErrorKind(ErrorCode.E_ENCODE, detail)
    return ErrorKind(ErrorCode.E_PROTOCOL, detail)
