"""Shared server machinery for protocol endpoints."""

from __future__ import annotations

import asyncio
import json
import logging
import time
from typing import Any, AsyncIterator, Awaitable, Callable

from .. import sse
from ..envelope import Envelope, IdFactory, ProtocolError, dumps, new_envelope
from ..pal import TIMESTAMP_HEADER, CodecEntry
from ..transport import HttpRequest, HttpResponse, ServerApp

log = logging.getLogger(__name__)

Handler = Callable[[Envelope], Awaitable[Any]]
StreamHandler = Callable[[Envelope], AsyncIterator[dict]]

DEFAULT_REPLAY_WINDOW = 60.0
DEFAULT_MAX_SKEW = 30.0
# Absorbs float noise so an offset of exactly max_skew is still accepted.
SKEW_TOLERANCE = 1e-9


async def echo_handler(e: Envelope) -> dict:
    return dict(e.content)


def json_response(status: int, doc: Any, headers: dict[str, str] | None = None) -> HttpResponse:
    return HttpResponse(status, {"content-type": "application/json", **(headers or {})}, dumps(doc))


class ReplayCache:
    """Coalesces duplicates of one idempotency key inside a bounded window.

    The first arrival runs the handler; later arrivals within ``window``
    seconds (including concurrent ones) receive the identical response.
    """

    def __init__(self, window: float, clock: Callable[[], float]):
        self.window = window
        self.clock = clock
        self._entries: dict[str, tuple[float, asyncio.Future]] = {}

    def _evict(self, now: float) -> None:
        stale = [k for k, (t, _) in self._entries.items() if now - t > self.window]
        for k in stale:
            del self._entries[k]

    async def run(self, key: str, fn: Callable[[], Awaitable[Any]]) -> tuple[Any, bool]:
        """Return ``(response, replayed)``; failed (non-ok) responses are not cached."""
        now = self.clock()
        self._evict(now)
        hit = self._entries.get(key)
        if hit is not None:
            return await asyncio.shield(hit[1]), True
        fut = asyncio.get_running_loop().create_future()
        self._entries[key] = (now, fut)
        try:
            resp = await fn()
        except BaseException:
            # Waiters see a cancellation and the next duplicate runs afresh.
            del self._entries[key]
            fut.cancel()
            raise
        if not getattr(resp, "ok", True):
            del self._entries[key]
        fut.set_result(resp)
        return resp, False

    def __len__(self) -> int:
        return len(self._entries)


class AgentServer(ServerApp):
    """Hosts one agent behind a protocol's endpoints.

    Subclasses register routes in ``self.routes`` keyed by ``(method, path)``
    and may override :meth:`match_route` for templated paths.
    """

    protocol_name = ""

    def __init__(
        self,
        agent_id: str,
        handler: Handler | None = None,
        *,
        stream_handler: StreamHandler | None = None,
        clock: Callable[[], float] | None = None,
        ids: Callable[[], str] | None = None,
        auth_tokens: set[str] | None = None,
        max_skew: float | None = DEFAULT_MAX_SKEW,
        replay_window: float = DEFAULT_REPLAY_WINDOW,
        codec: CodecEntry | None = None,
    ):
        self.agent_id = agent_id
        self.handler = handler or echo_handler
        self.stream_handler = stream_handler
        self.clock = clock or time.time
        self.ids = ids or IdFactory()
        self.auth_tokens = auth_tokens
        self.max_skew = max_skew
        self.replay = ReplayCache(replay_window, self.clock)
        self.codec = codec
        self.effects = 0
        self.denied = 0
        self.routes: dict[tuple[str, str], Callable[[HttpRequest], Awaitable[HttpResponse]]] = {
            ("GET", "/health"): self.health,
        }

    # -- routing

    def match_route(self, request: HttpRequest):
        return self.routes.get((request.method.upper(), request.path))

    async def handle(self, request: HttpRequest) -> HttpResponse:
        route = self.match_route(request)
        if route is None:
            return json_response(404, {"error": "not found"})
        try:
            return await route(request)
        except ProtocolError as err:
            return json_response(400, {"error": err.error.to_dict()})

    async def health(self, request: HttpRequest) -> HttpResponse:
        return json_response(200, {"status": "ok"})

    # -- guards

    def guard(self, request: HttpRequest) -> HttpResponse | None:
        """Authorization and freshness checks for state-changing requests."""
        if self.auth_tokens is not None:
            auth = request.header("authorization", "") or ""
            token = auth[7:] if auth.startswith("Bearer ") else None
            if token not in self.auth_tokens:
                self.denied += 1
                return json_response(401, {"error": "unauthorized"})
        stamp = request.header(TIMESTAMP_HEADER)
        if stamp is not None and self.max_skew is not None:
            try:
                skew = abs(self.clock() - float(stamp))
            except ValueError:
                return json_response(400, {"error": "bad timestamp"})
            if skew > self.max_skew + SKEW_TOLERANCE:
                self.denied += 1
                return json_response(401, {"error": "timestamp outside accept window"})
        return None

    def fresh(self, e: Envelope) -> bool:
        return self.max_skew is None or abs(self.clock() - e.ts) <= self.max_skew + SKEW_TOLERANCE

    # -- application dispatch

    def reply(self, request: Envelope, content: Any) -> Envelope:
        if isinstance(content, Envelope):
            return content
        if not isinstance(content, dict):
            content = {"result": content}
        return new_envelope(
            self.agent_id,
            request.src,
            content,
            intent=request.intent,
            ids=self.ids,
            clock=self.clock,
            trace_id=request.context.trace_id,
            parent_id=request.id,
            idempotency_key=request.context.idempotency_key,
            session_id=request.context.session_id,
            tags=request.context.tags,
            protocol_hint=self.protocol_name,
        )

    async def invoke(self, e: Envelope) -> Envelope:
        self.effects += 1
        result = await self.handler(e)
        return self.reply(e, result)

    async def stream_fragments(self, e: Envelope) -> AsyncIterator[Envelope]:
        self.effects += 1
        if self.stream_handler is None:
            yield self.reply(e, await self.handler(e))
            return
        async for content in self.stream_handler(e):
            yield self.reply(e, content).with_context(stream=True)

    def sse_response(self, e: Envelope, encode: Callable[[Envelope], dict]) -> HttpResponse:
        async def events() -> AsyncIterator[bytes]:
            try:
                async for fragment in self.stream_fragments(e):
                    yield sse.format_event(sse.FRAGMENT_EVENT, dumps(encode(fragment)))
            except ProtocolError as err:
                yield sse.format_event("error", dumps(err.error.to_dict()))
                return
            yield sse.format_event(sse.DONE_EVENT, b"{}")

        return HttpResponse(200, {"content-type": sse.CONTENT_TYPE, "cache-control": "no-cache"}, stream=events())

    async def serve_envelope(
        self,
        request: HttpRequest,
        decode: Callable[[dict, dict[str, str]], Envelope],
        encode: Callable[[Envelope], dict],
        *,
        streaming: bool = False,
    ) -> HttpResponse:
        """Guard, decode, dispatch (deduplicated) and encode one message POST."""
        denied = self.guard(request)
        if denied is not None:
            return denied
        try:
            e = decode(json.loads(request.body), request.headers)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            return json_response(400, {"error": f"malformed request: {exc}"})
        if streaming and (e.context.stream or sse.CONTENT_TYPE in (request.header("accept") or "")):
            return self.sse_response(e, encode)

        async def run() -> HttpResponse:
            return json_response(200, encode(await self.invoke(e)))

        return await self.dedup(e.context.idempotency_key, run)

    async def dedup(self, key: str, fn: Callable[[], Awaitable[HttpResponse]]) -> HttpResponse:
        if not key:
            return await fn()
        resp, _ = await self.replay.run(key, fn)
        return resp


def parse_json(body: bytes) -> Any:
    return json.loads(body)


def require_dict(value: Any, field: str) -> dict:
    if not isinstance(value, dict):
        raise TypeError(f"{field} must be a document")
    return value
