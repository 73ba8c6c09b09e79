"""Agora: tasks bound to plain-text routine documents by SHA-256 hash.

A request naming a registered ``protocol_hash`` runs that routine. Requests
with no hash, or an unknown hash plus ``fallback_text``, take the
natural-language path. An unknown hash without fallback is a protocol error.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Awaitable, Callable

from ..envelope import Envelope, EnvelopeContext, EnvelopeMeta, ErrorCode, ProtocolError, dumps
from ..pal import CodecEntry, HttpAdapter
from ..transport import ConfigError, HttpRequest, HttpResponse
from .base import AgentServer, json_response, require_dict

PROTOCOL_VERSION = "1.0"
TARGET_SCHEME = "agent://"
CONVERSATIONS_PREFIX = "/conversations/"


def routine_hash(document: str | bytes) -> str:
    if isinstance(document, str):
        document = document.encode("utf-8")
    return hashlib.sha256(document).hexdigest()


def render_text(content: dict[str, Any]) -> str:
    """Natural-language rendering used as the fallback channel."""
    text = content.get("text")
    return text if isinstance(text, str) else json.dumps(content, sort_keys=True, ensure_ascii=False)


def _metadata(e: Envelope) -> dict[str, Any]:
    return {**e.context.to_dict(), "intent": e.intent, "ts": e.ts, **e.meta.to_dict()}


def agora_encode(e: Envelope, protocol_hash: str | None = None, fallback_text: str | None = None) -> dict[str, Any]:
    doc: dict[str, Any] = {"request_id": e.id}
    if protocol_hash is not None:
        doc["protocol_hash"] = protocol_hash
    doc.update(
        {
            "source": e.src,
            "target": TARGET_SCHEME + e.dst,
            "message": e.content,
            "metadata": _metadata(e),
        }
    )
    if fallback_text is not None:
        doc["fallback_text"] = fallback_text
    return doc


def _strip_target(target: str) -> str:
    return target[len(TARGET_SCHEME):] if target.startswith(TARGET_SCHEME) else target


def _envelope(rid: str, src: str, target: str, content: Any, metadata: dict[str, Any]) -> Envelope:
    return Envelope(
        id=rid,
        ts=metadata.get("ts", 0.0),
        src=src,
        dst=_strip_target(target),
        intent=metadata.get("intent", ""),
        content=require_dict(content, "message"),
        context=EnvelopeContext.from_dict(metadata),
        meta=EnvelopeMeta.from_dict(metadata),
    )


def agora_decode(doc: dict[str, Any], headers: dict[str, str] | None = None) -> Envelope:
    return _envelope(doc["request_id"], doc["source"], doc["target"], doc["message"], doc.get("metadata", {}))


def agora_encode_response(e: Envelope) -> dict[str, Any]:
    return {
        "status": "ok",
        "body": e.content,
        "request_id": e.id,
        "source": e.src,
        "target": TARGET_SCHEME + e.dst,
        "metadata": _metadata(e),
    }


def agora_decode_response(doc: dict[str, Any]) -> Envelope:
    if doc.get("status") != "ok":
        raise ProtocolError.of(ErrorCode.E_PROTOCOL, f"agora task failed: {doc.get('body')!r}")
    return _envelope(doc["request_id"], doc["source"], doc["target"], doc["body"], doc.get("metadata", {}))


AGORA_CODEC = CodecEntry(
    "agora",
    agora_encode,
    agora_decode,
    encode_response=agora_encode_response,
    decode_response=agora_decode_response,
)


def _error(status: int, detail: str) -> HttpResponse:
    return json_response(status, {"status": "error", "body": {"kind": ErrorCode.E_PROTOCOL.value, "detail": detail}})


class AgoraServer(AgentServer):
    protocol_name = "agora"

    def __init__(self, agent_id: str, handler=None, **kwargs: Any):
        super().__init__(agent_id, handler, **kwargs)
        self.routines: dict[str, tuple[str, Callable[[Envelope], Awaitable[Any]]]] = {}
        self.conversations: dict[str, list[dict[str, Any]]] = {}
        self.routes.update(
            {
                ("GET", "/.well-known"): self.well_known,
                ("POST", "/agora"): self.agora,
            }
        )

    def register_routine(self, document: str, handler, *, protocol_hash: str | None = None) -> str:
        digest = routine_hash(document)
        if protocol_hash is not None and protocol_hash != digest:
            raise ConfigError("protocol_hash does not match routine document")
        if digest in self.routines:
            raise ConfigError(f"routine already registered: {digest}")
        self.routines[digest] = (document, handler)
        return digest

    def match_route(self, request: HttpRequest):
        if request.method.upper() == "POST" and request.path.startswith(CONVERSATIONS_PREFIX):
            return self.conversation
        return super().match_route(request)

    async def well_known(self, request: HttpRequest) -> HttpResponse:
        return json_response(
            200,
            {
                "name": self.agent_id,
                "protocol": "agora",
                "protocolVersion": PROTOCOL_VERSION,
                "protocol_hashes": sorted(self.routines),
                "endpoints": {"task": "/agora", "conversations": CONVERSATIONS_PREFIX + "{conversationId}"},
            },
        )

    def _select(self, doc: dict[str, Any]):
        """Pick the handler for a task document, or an error response."""
        protocol_hash = doc.get("protocol_hash")
        document = doc.get("protocol_document")
        if protocol_hash is not None and document is not None and routine_hash(document) != protocol_hash:
            return None, _error(400, "protocol_hash does not match protocol_document")
        if protocol_hash is None:
            return self.handler, None
        if protocol_hash in self.routines:
            return self.routines[protocol_hash][1], None
        if doc.get("fallback_text") is not None:
            return self.handler, None
        return None, _error(422, f"unknown protocol_hash {protocol_hash} and no fallback")

    async def _task(self, request: HttpRequest, conversation_id: str | None) -> HttpResponse:
        denied = self.guard(request)
        if denied is not None:
            return denied
        try:
            doc = json.loads(request.body)
            e = agora_decode(doc)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            return json_response(400, {"status": "error", "body": f"malformed request: {exc}"})
        handler, failure = self._select(doc)
        if failure is not None:
            return failure
        if conversation_id is None and doc.get("metadata", {}).get("multi_round"):
            conversation_id = self.ids()
            self.conversations[conversation_id] = []

        async def run() -> HttpResponse:
            self.effects += 1
            if conversation_id is not None:
                self.conversations[conversation_id].append(e.content)
            reply = self.reply(e, await handler(e))
            body = agora_encode_response(reply)
            if conversation_id is not None:
                body["conversation_id"] = conversation_id
                body["round"] = len(self.conversations[conversation_id])
            return json_response(200, body)

        return await self.dedup(e.context.idempotency_key, run)

    async def agora(self, request: HttpRequest) -> HttpResponse:
        return await self._task(request, None)

    async def conversation(self, request: HttpRequest) -> HttpResponse:
        conversation_id = request.path[len(CONVERSATIONS_PREFIX):]
        if conversation_id not in self.conversations:
            return json_response(404, {"status": "error", "body": "unknown conversation"})
        return await self._task(request, conversation_id)


class AgoraAdapter(HttpAdapter):
    protocol_name = "agora"
    message_path = "/agora"
    discovery_path = "/.well-known"

    def __init__(self, *args: Any, routine: str | None = None, **kwargs: Any):
        super().__init__(*args, **kwargs)
        self.routine = routine
        self.protocol_hash = routine_hash(routine) if routine is not None else None

    @property
    def server_hashes(self) -> set[str]:
        return set((self.discovery or {}).get("protocol_hashes", ()))

    def _task_doc(self, e: Envelope) -> dict[str, Any]:
        if self.protocol_hash is None:
            return agora_encode(e)
        fallback = None if self.protocol_hash in self.server_hashes else render_text(e.content)
        return agora_encode(e, self.protocol_hash, fallback)

    def _encode(self, e: Envelope) -> bytes:
        try:
            return dumps(self._task_doc(e))
        except (TypeError, ValueError) as exc:
            raise ProtocolError.of(ErrorCode.E_ENCODE, str(exc)) from exc

    def _check_status(self, resp: HttpResponse) -> None:
        if resp.ok:
            return
        try:
            doc = json.loads(resp.body)
        except ValueError:
            doc = None
        if resp.status == 422 and isinstance(doc, dict) and doc.get("status") == "error":
            raise ProtocolError.of(ErrorCode.E_PROTOCOL, str(doc.get("body")))
        super()._check_status(resp)

    async def converse(self, e: Envelope, conversation_id: str | None = None) -> tuple[str, Envelope]:
        """One round of a multi-round conversation; returns ``(conversation_id, reply)``."""
        doc = self._task_doc(e)
        path = self.message_path
        if conversation_id is None:
            doc["metadata"]["multi_round"] = True
        else:
            path = CONVERSATIONS_PREFIX + conversation_id
        req = HttpRequest("POST", path, self._headers(e), dumps(doc))

        async def once() -> tuple[str, Envelope]:
            resp = await self.network.request(self.descriptor.address, req, self.tap_context(e.meta.retry_count))
            self._check_status(resp)
            body = json.loads(resp.body)
            return body["conversation_id"], self._decode(resp.body)

        return await self._metered(once())
