"""Protocol abstraction layer: codec registry, adapters, metering, retries.

Adapters perform exactly one transport attempt per ``send``. Retry policy is
owned by the caller (see :func:`send_with_retry`), which stamps
``meta.retry_count`` so retried bytes land in the overhead counter.
"""

from __future__ import annotations

import asyncio
import json
import random
import time
from dataclasses import dataclass
from typing import Any, AsyncIterator, Callable

from . import sse
from .envelope import Envelope, ErrorCode, ProtocolError, dumps, normalize_error
from .transport import ConfigError, HttpRequest, HttpResponse, Network, split_url
from .wire import HANDSHAKE, MetricLabels, MetricsRegistry, TapContext

DEFAULT_TIMEOUT = 30.0  # message_timeout
MAX_RETRIES = 3
TIMESTAMP_HEADER = "x-request-timestamp"


@dataclass(frozen=True)
class CodecEntry:
    protocol_name: str
    encode: Callable[[Envelope], dict]
    decode: Callable[..., Envelope]
    encode_response: Callable[[Envelope], dict] | None = None
    decode_response: Callable[[dict], Envelope] | None = None
    transport_hints: Callable[[Envelope], dict[str, str]] | None = None

    def encode_reply(self, e: Envelope) -> dict:
        return (self.encode_response or self.encode)(e)

    def decode_reply(self, doc: dict) -> Envelope:
        return (self.decode_response or self.decode)(doc)


class CodecRegistry:
    """Write-once table of codecs keyed by lowercase protocol name."""

    def __init__(self) -> None:
        self._entries: dict[str, CodecEntry] = {}
        self._frozen = False

    def register(self, entry: CodecEntry) -> None:
        if self._frozen:
            raise ConfigError("codec registry is frozen")
        if entry.protocol_name in self._entries:
            raise ConfigError(f"codec already registered: {entry.protocol_name}")
        self._entries[entry.protocol_name] = entry

    def freeze(self) -> "CodecRegistry":
        self._frozen = True
        return self

    def get(self, protocol_name: str) -> CodecEntry:
        try:
            return self._entries[protocol_name]
        except KeyError:
            raise ProtocolError.of(ErrorCode.E_UNSUPPORTED, f"no codec for protocol {protocol_name!r}") from None

    def __contains__(self, protocol_name: str) -> bool:
        return protocol_name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)


@dataclass(frozen=True)
class AdapterDescriptor:
    protocol_name: str
    dst_id: str
    endpoint: str
    credentials: str | None = None

    @property
    def address(self) -> str:
        return split_url(self.endpoint)[0]


@dataclass(frozen=True)
class Fragment:
    """One element of a streamed reply; the last one has ``final=True``."""

    index: int
    envelope: Envelope | None = None
    final: bool = False


class Adapter:
    """Client side of one egress edge."""

    protocol_name = ""
    supports_streaming = False

    def __init__(
        self,
        descriptor: AdapterDescriptor,
        network: Network,
        codecs: CodecRegistry,
        *,
        src_agent: str,
        metrics: MetricsRegistry | None = None,
        clock: Callable[[], float] | None = None,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        if descriptor.protocol_name != self.protocol_name:
            raise ConfigError(f"{type(self).__name__} cannot serve {descriptor.protocol_name!r}")
        self.descriptor = descriptor
        self.network = network
        self.codec = codecs.get(descriptor.protocol_name)
        self.src_agent = src_agent
        self.metrics = metrics or MetricsRegistry()
        self.clock = clock or time.time
        self.timeout = timeout
        self.discovery: dict | None = None
        self.closed = False

    @property
    def labels(self) -> MetricLabels:
        return MetricLabels(self.src_agent, self.descriptor.dst_id, self.protocol_name)

    def tap_context(self, attempt: int = 0, kind: str = "payload") -> TapContext:
        return TapContext(self.src_agent, self.descriptor.dst_id, self.protocol_name, attempt, kind)

    async def initialize(self) -> None:
        raise NotImplementedError

    async def health_check(self) -> bool:
        raise NotImplementedError

    async def cleanup(self) -> None:
        self.closed = True

    async def send(self, e: Envelope) -> Envelope:
        raise NotImplementedError

    async def send_streaming(self, e: Envelope) -> AsyncIterator[Fragment]:
        raise ProtocolError.of(ErrorCode.E_UNSUPPORTED, f"{self.protocol_name} does not stream")
        yield  # pragma: no cover

    async def receive_message(self) -> dict | None:
        """Inbox polling is not offered by client adapters."""
        return None

    async def _metered(self, coro):
        start = self.clock()
        try:
            result = await asyncio.wait_for(coro, self.timeout)
        except ProtocolError:
            self.metrics.count_failure(self.labels)
            raise
        except asyncio.CancelledError:
            raise
        except Exception as exc:  # normalized below
            self.metrics.count_failure(self.labels)
            raise ProtocolError(normalize_error(exc)) from exc
        self.metrics.observe_latency(self.labels, self.clock() - start)
        return result


class HttpAdapter(Adapter):
    """Shared send path of the HTTP-family protocols."""

    message_path = "/message"
    discovery_path = "/.well-known/agent.json"
    health_path = "/health"

    def _headers(self, e: Envelope | None = None) -> dict[str, str]:
        headers = {"content-type": "application/json"}
        if self.descriptor.credentials:
            headers["authorization"] = f"Bearer {self.descriptor.credentials}"
        if e is not None:
            headers[TIMESTAMP_HEADER] = repr(float(e.ts))
            if self.codec.transport_hints:
                headers.update(self.codec.transport_hints(e))
        return headers

    def _message_path(self, e: Envelope) -> str:
        return self.message_path

    def _encode(self, e: Envelope) -> bytes:
        try:
            return dumps(self.codec.encode(e))
        except ProtocolError:
            raise
        except (TypeError, ValueError) as exc:
            raise ProtocolError.of(ErrorCode.E_ENCODE, str(exc)) from exc

    def _decode(self, body: bytes) -> Envelope:
        try:
            doc = json.loads(body)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ProtocolError.of(ErrorCode.E_DECODE, str(exc)) from exc
        try:
            return self.codec.decode_reply(doc)
        except ProtocolError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ProtocolError.of(ErrorCode.E_DECODE, f"malformed {self.protocol_name} reply: {exc}") from exc

    def _check_status(self, resp: HttpResponse) -> None:
        if not resp.ok:
            summary = resp.body[:200].decode("utf-8", "replace")
            raise ProtocolError.of(ErrorCode.E_HTTP, summary or f"HTTP {resp.status}", resp.status)

    async def _get(self, path: str, kind: str = HANDSHAKE) -> HttpResponse:
        req = HttpRequest("GET", path, self._headers())
        return await self.network.request(self.descriptor.address, req, self.tap_context(kind=kind))

    async def initialize(self) -> None:
        try:
            resp = await asyncio.wait_for(self._get(self.discovery_path), self.timeout)
        except ProtocolError:
            raise
        except Exception as exc:
            raise ProtocolError(normalize_error(exc)) from exc
        self._check_status(resp)
        self.discovery = json.loads(resp.body)

    async def health_check(self) -> bool:
        try:
            resp = await asyncio.wait_for(self._get(self.health_path, kind="control"), self.timeout)
        except Exception:
            return False
        return resp.ok

    async def send(self, e: Envelope) -> Envelope:
        return await self._metered(self._send_once(e))

    async def _send_once(self, e: Envelope) -> Envelope:
        body = self._encode(e)
        req = HttpRequest("POST", self._message_path(e), self._headers(e), body)
        resp = await self.network.request(self.descriptor.address, req, self.tap_context(e.meta.retry_count))
        if resp.stream is not None:
            return await self._last_fragment(resp.stream)
        self._check_status(resp)
        return self._decode(resp.body)

    async def _last_fragment(self, stream: AsyncIterator[bytes]) -> Envelope:
        """Collapse an event stream into its final data fragment."""
        last = None
        async for event, data in sse.parse_events(stream):
            if event == sse.DONE_EVENT:
                break
            if event == "error":
                raise ProtocolError.of(ErrorCode.E_PROTOCOL, data.decode("utf-8", "replace"))
            last = data
        if last is None:
            raise ProtocolError.of(ErrorCode.E_PROTOCOL, "stream carried no fragments")
        return self._decode(last)

    def _stream_request(self, e: Envelope) -> Envelope:
        return e.with_context(stream=True)

    async def send_streaming(self, e: Envelope) -> AsyncIterator[Fragment]:
        if not self.supports_streaming:
            raise ProtocolError.of(ErrorCode.E_UNSUPPORTED, f"{self.protocol_name} path does not stream")
        e = self._stream_request(e)
        body = self._encode(e)
        headers = self._headers(e)
        headers["accept"] = sse.CONTENT_TYPE
        req = HttpRequest("POST", self._message_path(e), headers, body)
        try:
            resp = await asyncio.wait_for(
                self.network.request(self.descriptor.address, req, self.tap_context(e.meta.retry_count)),
                self.timeout,
            )
        except ProtocolError:
            self.metrics.count_failure(self.labels)
            raise
        except Exception as exc:
            self.metrics.count_failure(self.labels)
            raise ProtocolError(normalize_error(exc)) from exc
        if resp.stream is None:
            self._check_status(resp)
            yield Fragment(0, self._decode(resp.body))
            yield Fragment(1, final=True)
            return
        index = 0
        try:
            async for event, data in sse.parse_events(resp.stream):
                if event == sse.DONE_EVENT:
                    yield Fragment(index, final=True)
                    return
                if event == "error":
                    raise ProtocolError.of(ErrorCode.E_PROTOCOL, data.decode("utf-8", "replace"))
                yield Fragment(index, self._decode(data))
                index += 1
        except ProtocolError:
            self.metrics.count_failure(self.labels)
            raise
        except Exception as exc:
            self.metrics.count_failure(self.labels)
            raise ProtocolError(normalize_error(exc)) from exc
        self.metrics.count_failure(self.labels)
        raise ProtocolError.of(ErrorCode.E_PROTOCOL, "stream ended without terminal event")


class AdapterPool:
    """Guarantees one adapter instance per (dst_id, endpoint, credentials) edge."""

    def __init__(self, factory: Callable[[AdapterDescriptor], Adapter]):
        self._factory = factory
        self._adapters: dict[tuple, Adapter] = {}

    def get(self, descriptor: AdapterDescriptor) -> Adapter:
        key = (descriptor.dst_id, descriptor.endpoint, descriptor.credentials)
        adapter = self._adapters.get(key)
        if adapter is None or adapter.closed:
            adapter = self._factory(descriptor)
            self._adapters[key] = adapter
        return adapter

    def __len__(self) -> int:
        return len(self._adapters)

    async def cleanup(self) -> None:
        for adapter in self._adapters.values():
            await adapter.cleanup()


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = MAX_RETRIES
    base_delay: float = 0.1
    factor: float = 2.0
    retry_on: tuple[ErrorCode, ...] = (ErrorCode.E_TIMEOUT, ErrorCode.E_CONN, ErrorCode.E_HTTP)

    def backoff(self, attempt: int, rng: random.Random) -> float:
        """Full-jitter exponential backoff before retry ``attempt`` (1-based)."""
        return rng.uniform(0.0, self.base_delay * self.factor ** (attempt - 1))

    def retryable(self, err: ProtocolError) -> bool:
        if err.kind not in self.retry_on:
            return False
        if err.kind is ErrorCode.E_HTTP:
            return (err.error.http_status or 0) >= 500
        return True


async def send_with_retry(
    adapter: Adapter,
    e: Envelope,
    policy: RetryPolicy = RetryPolicy(),
    rng: random.Random | None = None,
    on_retry: Callable[[int, ProtocolError], Any] | None = None,
) -> Envelope:
    rng = rng or random.Random(0)
    attempt = 0
    while True:
        try:
            return await adapter.send(e.with_meta(retry_count=attempt))
        except ProtocolError as err:
            if attempt >= policy.max_retries or not policy.retryable(err):
                raise
            attempt += 1
            if on_retry is not None:
                on_retry(attempt, err)
            await asyncio.sleep(policy.backoff(attempt, rng))
