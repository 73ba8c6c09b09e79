"""Transports carrying encoded wire documents between adapters and servers.

Two interchangeable networks share one server-app interface:

* :class:`InProcessNetwork` delivers requests to registered apps inside the
  running event loop. It models node death (connection refused / reset) and an
  optional one-way link latency, and is what the scenario harness uses.
* :class:`TcpNetwork` serves the same apps over real HTTP/WebSocket sockets
  with aiohttp.

Both route every client-side frame through a :class:`~protomesh.wire.WireTap`.
"""

from __future__ import annotations

import asyncio
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import AsyncIterator, Callable

from .wire import PAYLOAD, TapContext, WireTap


class ConfigError(Exception):
    """Invalid configuration (duplicate registration, port conflict, ...)."""


class ConnectionClosed(ConnectionError):
    pass


@dataclass
class HttpRequest:
    method: str
    path: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    query: dict[str, str] = field(default_factory=dict)

    def header(self, name: str, default: str | None = None) -> str | None:
        return self.headers.get(name.lower(), default)


@dataclass
class HttpResponse:
    status: int = 200
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    stream: AsyncIterator[bytes] | None = None

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300


class FrameConnection(ABC):
    """Bidirectional message-framed connection (the ``/ws`` socket)."""

    @abstractmethod
    async def send(self, data: bytes, kind: str = PAYLOAD) -> None: ...

    @abstractmethod
    async def recv(self) -> bytes: ...

    @abstractmethod
    async def close(self) -> None: ...

    @property
    @abstractmethod
    def closed(self) -> bool: ...


class ServerApp:
    """Base class for protocol servers."""

    async def handle(self, request: HttpRequest) -> HttpResponse:
        return HttpResponse(404)

    async def handle_ws(self, conn: FrameConnection) -> None:
        await conn.close()

    def on_stop(self) -> None:
        """Called when the hosting node is stopped or killed."""


def _lower(headers: dict[str, str]) -> dict[str, str]:
    return {k.lower(): v for k, v in headers.items()}


def split_url(url: str) -> tuple[str, str]:
    """``http://host:port/path`` -> (``host:port``, ``/path``)."""
    rest = url.split("://", 1)[-1]
    if "/" in rest:
        address, path = rest.split("/", 1)
        return address, "/" + path
    return rest, "/"


class Network(ABC):
    def __init__(self, tap: WireTap | None = None):
        self.tap = tap or WireTap()

    @abstractmethod
    async def serve(self, address: str, app: ServerApp) -> None: ...

    @abstractmethod
    async def stop(self, address: str) -> None: ...

    @abstractmethod
    async def request(self, address: str, request: HttpRequest, ctx: TapContext) -> HttpResponse:
        """One transport attempt. Streaming bodies are tapped chunk by chunk."""

    @abstractmethod
    async def connect_ws(
        self, address: str, path: str, ctx: TapContext, classify: Callable[[bytes], str] | None = None
    ) -> FrameConnection: ...

    @abstractmethod
    def is_up(self, address: str) -> bool: ...

    async def close(self) -> None:
        pass

    def _tap_stream(self, stream: AsyncIterator[bytes], ctx: TapContext) -> AsyncIterator[bytes]:
        async def tapped() -> AsyncIterator[bytes]:
            async for chunk in stream:
                self.tap.record(ctx, "in", chunk)
                yield chunk

        return tapped()


# --------------------------------------------------------------------------- in-process


class _QueueConnection(FrameConnection):
    def __init__(self, inbox: asyncio.Queue, peer_inbox: asyncio.Queue):
        self._inbox = inbox
        self._peer_inbox = peer_inbox
        self._closed = False
        self.tap: WireTap | None = None
        self.ctx: TapContext | None = None
        self.classify: Callable[[bytes], str] | None = None
        self.latency = 0.0

    @property
    def closed(self) -> bool:
        return self._closed

    async def send(self, data: bytes, kind: str = PAYLOAD) -> None:
        if self._closed:
            raise ConnectionClosed("send on closed connection")
        if self.tap is not None:
            self.tap.record(self.ctx, "out", data, kind)
        if self.latency:
            await asyncio.sleep(self.latency)
        self._peer_inbox.put_nowait(data)

    async def recv(self) -> bytes:
        if self._closed and self._inbox.empty():
            raise ConnectionClosed("connection closed")
        data = await self._inbox.get()
        if data is None:
            self._closed = True
            raise ConnectionClosed("connection closed by peer")
        if self.tap is not None:
            kind = self.classify(data) if self.classify else PAYLOAD
            self.tap.record(self.ctx, "in", data, kind)
        return data

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._peer_inbox.put_nowait(None)
            self._inbox.put_nowait(None)


@dataclass
class _Host:
    app: ServerApp
    epoch: int
    tasks: set = field(default_factory=set)
    conns: list = field(default_factory=list)


class InProcessNetwork(Network):
    """Loopback network living inside one event loop."""

    def __init__(self, tap: WireTap | None = None, latency: float = 0.0):
        super().__init__(tap)
        self.latency = latency
        self._hosts: dict[str, _Host] = {}
        self._epoch = 0

    def is_up(self, address: str) -> bool:
        return address in self._hosts

    async def serve(self, address: str, app: ServerApp) -> None:
        if address in self._hosts:
            raise ConfigError(f"address already in use: {address}")
        self._epoch += 1
        self._hosts[address] = _Host(app, self._epoch)

    async def stop(self, address: str) -> None:
        """Abrupt stop: in-flight handlers are cancelled, sockets reset."""
        host = self._hosts.pop(address, None)
        if host is None:
            return
        for task in list(host.tasks):
            task.cancel()
        for conn in host.conns:
            await conn.close()
        host.app.on_stop()

    def _host(self, address: str) -> _Host:
        host = self._hosts.get(address)
        if host is None:
            raise ConnectionRefusedError(f"connection refused: {address}")
        return host

    def _spawn(self, host: _Host, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        host.tasks.add(task)
        task.add_done_callback(host.tasks.discard)
        return task

    async def request(self, address: str, request: HttpRequest, ctx: TapContext) -> HttpResponse:
        host = self._host(address)
        request.headers = _lower(request.headers)
        self.tap.record(ctx, "out", request.body)
        if self.latency:
            await asyncio.sleep(self.latency)
            host = self._host(address)
        task = self._spawn(host, host.app.handle(request))
        try:
            response = await asyncio.shield(task)
        except asyncio.CancelledError:
            if task.cancelled() and not _current_cancelling():
                raise ConnectionResetError(f"connection reset: {address}") from None
            raise
        if self.latency:
            await asyncio.sleep(self.latency)
        if response.stream is not None:
            response.stream = self._tap_stream(self._guard_stream(address, host.epoch, response.stream), ctx)
        else:
            self.tap.record(ctx, "in", response.body)
        return response

    async def _guard_stream(self, address: str, epoch: int, stream: AsyncIterator[bytes]) -> AsyncIterator[bytes]:
        async for chunk in stream:
            host = self._hosts.get(address)
            if host is None or host.epoch != epoch:
                raise ConnectionResetError(f"stream reset: {address}")
            yield chunk

    async def connect_ws(self, address, path, ctx, classify=None) -> FrameConnection:
        host = self._host(address)
        a: asyncio.Queue = asyncio.Queue()
        b: asyncio.Queue = asyncio.Queue()
        client = _QueueConnection(a, b)
        server = _QueueConnection(b, a)
        client.tap, client.ctx, client.classify = self.tap, ctx, classify
        client.latency = server.latency = self.latency
        host.conns.append(server)
        self._spawn(host, self._run_ws(host, server))
        return client

    async def _run_ws(self, host: _Host, conn: _QueueConnection) -> None:
        try:
            await host.app.handle_ws(conn)
        finally:
            await conn.close()
            if conn in host.conns:
                host.conns.remove(conn)


def _current_cancelling() -> bool:
    task = asyncio.current_task()
    # Task.cancelling() exists from 3.11; on 3.10 fall back to the private flag.
    if task is None:
        return False
    if hasattr(task, "cancelling"):
        return task.cancelling() > 0
    return bool(getattr(task, "_must_cancel", False))


# --------------------------------------------------------------------------- TCP (aiohttp)


class _AiohttpClientConn(FrameConnection):
    def __init__(self, ws, tap: WireTap, ctx: TapContext, classify):
        self._ws = ws
        self._tap = tap
        self._ctx = ctx
        self._classify = classify

    @property
    def closed(self) -> bool:
        return self._ws.closed

    async def send(self, data: bytes, kind: str = PAYLOAD) -> None:
        if self._ws.closed:
            raise ConnectionClosed("send on closed connection")
        self._tap.record(self._ctx, "out", data, kind)
        await self._ws.send_bytes(data)

    async def recv(self) -> bytes:
        import aiohttp

        msg = await self._ws.receive()
        if msg.type != aiohttp.WSMsgType.BINARY:
            raise ConnectionClosed(f"websocket closed ({msg.type})")
        kind = self._classify(msg.data) if self._classify else PAYLOAD
        self._tap.record(self._ctx, "in", msg.data, kind)
        return msg.data

    async def close(self) -> None:
        await self._ws.close()


class _AiohttpServerConn(FrameConnection):
    def __init__(self, ws):
        self._ws = ws

    @property
    def closed(self) -> bool:
        return self._ws.closed

    async def send(self, data: bytes, kind: str = PAYLOAD) -> None:
        if self._ws.closed:
            raise ConnectionClosed("send on closed connection")
        await self._ws.send_bytes(data)

    async def recv(self) -> bytes:
        import aiohttp

        msg = await self._ws.receive()
        if msg.type != aiohttp.WSMsgType.BINARY:
            raise ConnectionClosed(f"websocket closed ({msg.type})")
        return msg.data

    async def close(self) -> None:
        await self._ws.close()


class TcpNetwork(Network):
    """Real sockets: aiohttp servers and one shared aiohttp client session."""

    def __init__(self, tap: WireTap | None = None):
        super().__init__(tap)
        self._runners: dict[str, object] = {}
        self._apps: dict[str, ServerApp] = {}
        self._session = None

    def is_up(self, address: str) -> bool:
        return address in self._runners

    async def _client(self):
        import aiohttp

        if self._session is None:
            self._session = aiohttp.ClientSession()
        return self._session

    async def serve(self, address: str, app: ServerApp) -> None:
        from aiohttp import web

        host, port = address.rsplit(":", 1)

        async def dispatch(request: web.Request):
            if request.path == "/ws" and request.headers.get("Upgrade", "").lower() == "websocket":
                ws = web.WebSocketResponse()
                await ws.prepare(request)
                await app.handle_ws(_AiohttpServerConn(ws))
                return ws
            req = HttpRequest(
                method=request.method,
                path=request.path,
                headers=_lower(dict(request.headers)),
                body=await request.read(),
                query=dict(request.query),
            )
            resp = await app.handle(req)
            if resp.stream is None:
                return web.Response(status=resp.status, body=resp.body, headers=resp.headers)
            out = web.StreamResponse(status=resp.status, headers=resp.headers)
            await out.prepare(request)
            async for chunk in resp.stream:
                await out.write(chunk)
            await out.write_eof()
            return out

        web_app = web.Application()
        web_app.router.add_route("*", "/{tail:.*}", dispatch)
        runner = web.AppRunner(web_app)
        await runner.setup()
        site = web.TCPSite(runner, host, int(port))
        try:
            await site.start()
        except OSError as exc:
            await runner.cleanup()
            raise ConfigError(f"cannot bind {address}: {exc}") from exc
        self._runners[address] = runner
        self._apps[address] = app

    async def stop(self, address: str) -> None:
        runner = self._runners.pop(address, None)
        app = self._apps.pop(address, None)
        if runner is not None:
            await runner.cleanup()
        if app is not None:
            app.on_stop()

    async def request(self, address: str, request: HttpRequest, ctx: TapContext) -> HttpResponse:
        session = await self._client()
        self.tap.record(ctx, "out", request.body)
        url = f"http://{address}{request.path}"
        resp = await session.request(
            request.method, url, data=request.body or None, headers=request.headers, params=request.query or None
        )
        headers = _lower(dict(resp.headers))
        if headers.get("content-type", "").startswith("text/event-stream"):

            async def chunks() -> AsyncIterator[bytes]:
                try:
                    async for chunk in resp.content.iter_any():
                        yield chunk
                finally:
                    resp.release()

            return HttpResponse(resp.status, headers, stream=self._tap_stream(chunks(), ctx))
        body = await resp.read()
        resp.release()
        self.tap.record(ctx, "in", body)
        return HttpResponse(resp.status, headers, body)

    async def connect_ws(self, address, path, ctx, classify=None) -> FrameConnection:
        session = await self._client()
        ws = await session.ws_connect(f"http://{address}{path}")
        return _AiohttpClientConn(ws, self.tap, ctx, classify)

    async def close(self) -> None:
        for address in list(self._runners):
            await self.stop(address)
        if self._session is not None:
            await self._session.close()
            self._session = None
