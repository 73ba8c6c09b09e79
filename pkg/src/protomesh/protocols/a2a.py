"""A2A: JSON request/response on ``/message`` with event-stream replies."""

from __future__ import annotations

from dataclasses import replace
from typing import Any

from .. import sse
from ..envelope import Envelope, EnvelopeContext, EnvelopeMeta
from ..pal import CodecEntry, HttpAdapter
from ..transport import HttpRequest, HttpResponse
from .base import AgentServer, json_response, require_dict

PROTOCOL_VERSION = "1.0"


def a2a_encode(e: Envelope) -> dict[str, Any]:
    return {
        "id": e.id,
        "params": {
            "message": e.content,
            "context": e.context.to_dict(),
            "routing": {"destination": e.dst, "source": e.src},
            "meta": {"ts": e.ts, "intent": e.intent, **e.meta.to_dict()},
        },
    }


def a2a_decode(doc: dict[str, Any], headers: dict[str, str] | None = None) -> Envelope:
    params = doc["params"]
    routing = params["routing"]
    meta = params.get("meta", {})
    ctx = EnvelopeContext.from_dict(params.get("context", {}))
    if headers and sse.CONTENT_TYPE in headers.get("accept", ""):
        ctx = replace(ctx, stream=True)
    return Envelope(
        id=doc["id"],
        ts=meta.get("ts", 0.0),
        src=routing["source"],
        dst=routing["destination"],
        intent=meta.get("intent", ""),
        content=require_dict(params["message"], "params.message"),
        context=ctx,
        meta=EnvelopeMeta.from_dict(meta),
    )


def a2a_hints(e: Envelope) -> dict[str, str]:
    return {"accept": sse.CONTENT_TYPE} if e.context.stream else {}


A2A_CODEC = CodecEntry("a2a", a2a_encode, a2a_decode, transport_hints=a2a_hints)


class A2AServer(AgentServer):
    protocol_name = "a2a"

    def __init__(self, agent_id: str, handler=None, **kwargs: Any):
        super().__init__(agent_id, handler, **kwargs)
        self.routes[("GET", "/.well-known/agent.json")] = self.card
        self.routes[("POST", "/message")] = self.message

    async def card(self, request: HttpRequest) -> HttpResponse:
        return json_response(
            200,
            {
                "name": self.agent_id,
                "protocol": "a2a",
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {"streaming": True, "pushNotifications": False},
                "endpoints": {"message": "/message", "health": "/health"},
            },
        )

    async def message(self, request: HttpRequest) -> HttpResponse:
        return await self.serve_envelope(request, a2a_decode, a2a_encode, streaming=True)


class A2AAdapter(HttpAdapter):
    protocol_name = "a2a"
    supports_streaming = True
    message_path = "/message"
