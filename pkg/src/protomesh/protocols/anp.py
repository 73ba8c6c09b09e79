"""ANP: identity-bound, end-to-end encrypted persistent sessions over ``/ws``.

A three-message handshake authenticates both identities and agrees on
directional session keys:

* ``client_hello``   {did, public_key, eph_pub, nonce}
* ``server_hello``   {did, public_key, eph_pub, session_id, signature}
* ``client_confirm`` {signature}

Signatures cover the SHA-256 of the canonical transcript; the client's
confirmation signs ``transcript || b"confirm"``. After the handshake every
frame is sealed (see :mod:`protomesh.protocols.anp_crypto`). A plaintext HTTP
fallback on ``/anp/message`` exists for local testing and is reported as
insecure.
"""

from __future__ import annotations

import asyncio
import json
import os
from typing import Any, AsyncIterator

from ..envelope import Envelope, EnvelopeContext, EnvelopeMeta, ErrorCode, ProtocolError, dumps, normalize_error
from ..pal import Adapter, CodecEntry, Fragment
from ..transport import ConnectionClosed, FrameConnection, HttpRequest, HttpResponse
from ..wire import CONTROL, HANDSHAKE, PAYLOAD, RETRY_OVERHEAD
from .anp_crypto import (
    CLOSE,
    DATA,
    HEARTBEAT,
    EphemeralKey,
    Identity,
    SecureSession,
    derive_keys,
    did_for,
    encode_frame,
    parse_frame,
    transcript,
    verify_signature,
)
from .base import AgentServer, json_response, require_dict

ERROR_TAG = "error"
STREAM_DONE_TAG = "stream-done"
DID_DOC_PATH = "/.well-known/did.json"
WS_PATH = "/ws"
_CONTENT_KEY = "__content__"


# --------------------------------------------------------------------------- fallback codec


def anp_encode(e: Envelope) -> dict[str, Any]:
    ctx = e.context.to_dict()
    if "context" in e.content:
        payload = {_CONTENT_KEY: e.content, "context": ctx}
    else:
        payload = {**e.content, "context": ctx}
    return {
        "type": "anp_message",
        "request_id": e.id,
        "payload": payload,
        "timestamp": e.ts,
        "source_id": e.src,
        "target_did": e.dst,
        "meta": {"intent": e.intent, **e.meta.to_dict()},
    }


def anp_decode(doc: dict[str, Any], headers: dict[str, str] | None = None) -> Envelope:
    if doc.get("type") != "anp_message":
        raise ValueError(f"unexpected ANP message type {doc.get('type')!r}")
    payload = dict(require_dict(doc["payload"], "payload"))
    ctx = payload.pop("context", {})
    content = payload[_CONTENT_KEY] if _CONTENT_KEY in payload else payload
    meta = doc.get("meta", {})
    return Envelope(
        id=doc["request_id"],
        ts=doc["timestamp"],
        src=doc["source_id"],
        dst=doc["target_did"],
        intent=meta.get("intent", ""),
        content=require_dict(content, "payload"),
        context=EnvelopeContext.from_dict(ctx),
        meta=EnvelopeMeta.from_dict(meta),
    )


ANP_CODEC = CodecEntry("anp", anp_encode, anp_decode)


# --------------------------------------------------------------------------- handshake


def _conn_error(detail: str) -> ProtocolError:
    return ProtocolError.of(ErrorCode.E_CONN, f"handshake failed: {detail}")


async def _recv_json(conn: FrameConnection, expected: str) -> dict[str, Any]:
    try:
        doc = json.loads(await conn.recv())
    except ConnectionClosed as exc:
        raise _conn_error(f"peer closed before {expected}") from exc
    except ValueError as exc:
        raise _conn_error(f"unreadable {expected}") from exc
    if not isinstance(doc, dict) or doc.get("type") != expected:
        raise _conn_error(f"expected {expected}")
    return doc


async def client_handshake(
    conn: FrameConnection, identity: Identity, *, expected_did: str | None = None, verify: bool = True
) -> SecureSession:
    eph = EphemeralKey()
    hello = {
        "type": "client_hello",
        "did": identity.did,
        "public_key": identity.doc.public_key.hex(),
        "eph_pub": eph.public.hex(),
        "nonce": os.urandom(16).hex(),
    }
    await conn.send(dumps(hello), HANDSHAKE)
    reply = await _recv_json(conn, "server_hello")
    try:
        server_key = bytes.fromhex(reply["public_key"])
        fields = {k: reply[k] for k in ("did", "public_key", "eph_pub", "session_id")}
        signature = bytes.fromhex(reply["signature"])
        peer_eph = bytes.fromhex(reply["eph_pub"])
    except (KeyError, ValueError, TypeError) as exc:
        raise _conn_error("malformed server_hello") from exc
    digest = transcript(hello, fields)
    if verify:
        if reply["did"] != did_for(server_key):
            raise _conn_error("server key does not match its did fingerprint")
        if expected_did is not None and reply["did"] != expected_did:
            raise _conn_error(f"expected {expected_did}, peer is {reply['did']}")
        if not verify_signature(server_key, signature, digest):
            raise _conn_error("bad server signature")
    c2s, s2c = derive_keys(eph.exchange(peer_eph), bytes.fromhex(hello["nonce"]), reply["session_id"])
    confirm = {"type": "client_confirm", "signature": identity.sign(digest + b"confirm").hex()}
    await conn.send(dumps(confirm), HANDSHAKE)
    return SecureSession(reply["session_id"], identity.did, reply["did"], c2s, s2c, "client")


async def server_handshake(
    conn: FrameConnection, identity: Identity, session_id: str, *, verify: bool = True
) -> SecureSession:
    hello = await _recv_json(conn, "client_hello")
    try:
        client_key = bytes.fromhex(hello["public_key"])
        peer_eph = bytes.fromhex(hello["eph_pub"])
        salt = bytes.fromhex(hello["nonce"])
    except (KeyError, ValueError, TypeError) as exc:
        raise _conn_error("malformed client_hello") from exc
    if verify and hello.get("did") != did_for(client_key):
        raise _conn_error("client key does not match its did fingerprint")
    eph = EphemeralKey()
    fields = {
        "did": identity.did,
        "public_key": identity.doc.public_key.hex(),
        "eph_pub": eph.public.hex(),
        "session_id": session_id,
    }
    digest = transcript(hello, fields)
    await conn.send(dumps({"type": "server_hello", **fields, "signature": identity.sign(digest).hex()}), HANDSHAKE)
    confirm = await _recv_json(conn, "client_confirm")
    if verify:
        try:
            signature = bytes.fromhex(confirm.get("signature", ""))
        except (ValueError, TypeError) as exc:
            raise _conn_error("malformed client_confirm") from exc
        if not verify_signature(client_key, signature, digest + b"confirm"):
            raise _conn_error("bad client signature")
    c2s, s2c = derive_keys(eph.exchange(peer_eph), salt, session_id)
    return SecureSession(session_id, identity.did, hello["did"], c2s, s2c, "server")


def classify_frame(data: bytes) -> str:
    """Byte class of a received socket frame, for the wire tap."""
    if data[:1] == b"{":
        return HANDSHAKE
    try:
        header, _, _ = parse_frame(data)
    except ProtocolError:
        return PAYLOAD
    return PAYLOAD if header["frame_type"] == DATA else CONTROL


def _error_reply(server: AgentServer, e: Envelope, err: ProtocolError) -> Envelope:
    reply = server.reply(e, {"error": err.error.to_dict()})
    return reply.with_context(tags=reply.context.tags + (ERROR_TAG,))


def raise_if_error(reply: Envelope) -> Envelope:
    if ERROR_TAG in reply.context.tags:
        err = reply.content.get("error", {})
        raise ProtocolError.of(ErrorCode(err.get("kind", "E_PROTOCOL")), err.get("detail", ""), err.get("http_status"))
    return reply


# --------------------------------------------------------------------------- server


class ANPServer(AgentServer):
    protocol_name = "anp"

    def __init__(
        self,
        agent_id: str,
        handler=None,
        *,
        identity: Identity,
        verify_identity: bool = True,
        allow_fallback: bool = True,
        **kwargs: Any,
    ):
        super().__init__(agent_id, handler, **kwargs)
        self.identity = identity
        self.verify_identity = verify_identity
        self.allow_fallback = allow_fallback
        self.sessions: dict[str, SecureSession] = {}
        self.rejected_frames = 0
        self.handshake_failures = 0
        self.heartbeats = 0
        self.routes[("GET", DID_DOC_PATH)] = self.did_document
        self.routes[("POST", "/anp/message")] = self.fallback

    async def did_document(self, request: HttpRequest) -> HttpResponse:
        return json_response(200, self.identity.doc.to_dict())

    async def fallback(self, request: HttpRequest) -> HttpResponse:
        if not self.allow_fallback:
            return json_response(404, {"error": "fallback disabled"})
        return await self.serve_envelope(request, anp_decode, anp_encode)

    async def handle_ws(self, conn: FrameConnection) -> None:
        try:
            session = await server_handshake(conn, self.identity, self.ids(), verify=self.verify_identity)
        except (ProtocolError, ConnectionClosed):
            self.handshake_failures += 1
            await conn.close()
            return
        self.sessions[session.session_id] = session
        lock = asyncio.Lock()
        tasks: set[asyncio.Task] = set()
        try:
            while True:
                data = await conn.recv()
                try:
                    frame_type, plaintext = session.open_bytes(data)
                except ProtocolError:
                    self.rejected_frames += 1
                    continue
                if frame_type == CLOSE:
                    break
                if frame_type == HEARTBEAT:
                    self.heartbeats += 1
                    async with lock:
                        await conn.send(session.seal_bytes(b"", HEARTBEAT), CONTROL)
                    continue
                task = asyncio.ensure_future(self._serve_frame(conn, session, lock, plaintext))
                tasks.add(task)
                task.add_done_callback(tasks.discard)
        except ConnectionClosed:
            pass
        finally:
            for task in tasks:
                task.cancel()
            self.sessions.pop(session.session_id, None)

    async def _serve_frame(self, conn: FrameConnection, session: SecureSession, lock: asyncio.Lock, plaintext: bytes):
        try:
            e = Envelope.from_dict(json.loads(plaintext))
        except (ValueError, KeyError, TypeError):
            self.rejected_frames += 1
            return

        async def send(reply: Envelope) -> None:
            async with lock:
                await conn.send(session.seal(reply), PAYLOAD)

        try:
            if not self.fresh(e):
                await send(_error_reply(self, e, ProtocolError.of(ErrorCode.E_PROTOCOL, "stale timestamp")))
                return
            if e.context.stream:
                async for fragment in self.stream_fragments(e):
                    await send(fragment)
                done = self.reply(e, {})
                await send(done.with_context(stream=True, tags=done.context.tags + (STREAM_DONE_TAG,)))
                return
            try:
                reply = await self._dedup_invoke(e)
            except ProtocolError as err:
                reply = _error_reply(self, e, err)
            await send(reply)
        except ConnectionClosed:
            pass

    async def _dedup_invoke(self, e: Envelope) -> Envelope:
        if not e.context.idempotency_key:
            return await self.invoke(e)
        reply, replayed = await self.replay.run(e.context.idempotency_key, lambda: self.invoke(e))
        # Replayed replies are re-addressed to the duplicate so the caller can match them.
        return reply.with_context(parent_id=e.id) if replayed else reply

    def on_stop(self) -> None:
        self.sessions.clear()


# --------------------------------------------------------------------------- client


class ANPAdapter(Adapter):
    protocol_name = "anp"
    supports_streaming = True

    def __init__(
        self,
        *args: Any,
        identity: Identity,
        expected_did: str | None = None,
        verify_identity: bool = True,
        fallback: bool = False,
        heartbeat_interval: float | None = None,
        heartbeat_timeout: float | None = None,
        **kwargs: Any,
    ):
        super().__init__(*args, **kwargs)
        self.identity = identity
        self.expected_did = expected_did
        self.verify_identity = verify_identity
        self.fallback = fallback
        self.heartbeat_interval = heartbeat_interval
        self.heartbeat_timeout = heartbeat_timeout
        self.session: SecureSession | None = None
        self.conn: FrameConnection | None = None
        self.last_seen = 0.0
        self.rejected_frames = 0
        self._pending: dict[str, asyncio.Future] = {}
        self._streams: dict[str, asyncio.Queue] = {}
        self._send_lock = asyncio.Lock()
        self._tasks: list[asyncio.Task] = []
        self._session_lost = False

    @property
    def secure(self) -> bool:
        return not self.fallback

    # -- lifecycle

    async def initialize(self) -> None:
        if self.fallback:
            return
        try:
            self.conn = await self.network.connect_ws(
                self.descriptor.address, WS_PATH, self.tap_context(kind=HANDSHAKE), classify_frame
            )
            self.session = await asyncio.wait_for(
                client_handshake(
                    self.conn, self.identity, expected_did=self.expected_did, verify=self.verify_identity
                ),
                self.timeout,
            )
        except ProtocolError:
            await self._drop_connection()
            raise
        except Exception as exc:
            await self._drop_connection()
            raise ProtocolError(normalize_error(exc)) from exc
        self._session_lost = False
        self.last_seen = self.clock()
        self._tasks.append(asyncio.ensure_future(self._reader()))
        if self.heartbeat_interval:
            self._tasks.append(asyncio.ensure_future(self._heartbeat_loop()))

    async def _drop_connection(self) -> None:
        if self.conn is not None:
            await self.conn.close()
        self.conn = None
        self.session = None

    async def cleanup(self) -> None:
        if self.conn is not None and not self.conn.closed and self.session is not None:
            try:
                async with self._send_lock:
                    await self.conn.send(self.session.seal_bytes(b"", CLOSE), CONTROL)
            except ConnectionClosed:
                pass
        for task in self._tasks:
            task.cancel()
        self._tasks.clear()
        await self._drop_connection()
        self._fail_waiters(ProtocolError.of(ErrorCode.E_CONN, "session closed"))
        await super().cleanup()

    async def health_check(self) -> bool:
        if self.fallback:
            req = HttpRequest("GET", "/health", {})
            try:
                resp = await self.network.request(self.descriptor.address, req, self.tap_context(kind=CONTROL))
            except Exception:
                return False
            return resp.ok
        return self.detect_failure() == "alive"

    def detect_failure(self) -> str:
        """``"dead"`` once the session dropped or stayed silent past the timeout."""
        if self.session is None or self._session_lost:
            return "dead"
        if self.heartbeat_timeout is not None and self.clock() - self.last_seen > self.heartbeat_timeout:
            return "dead"
        return "alive"

    async def heartbeat(self) -> None:
        await self._send_frame(lambda s: s.seal_bytes(b"", HEARTBEAT), CONTROL)

    async def _heartbeat_loop(self) -> None:
        while True:
            await asyncio.sleep(self.heartbeat_interval)
            try:
                await self.heartbeat()
            except ProtocolError:
                return

    # -- receive path

    def _fail_waiters(self, err: ProtocolError) -> None:
        for fut in self._pending.values():
            if not fut.done():
                fut.set_exception(err)
        for queue in self._streams.values():
            queue.put_nowait(err)

    async def _reader(self) -> None:
        assert self.conn is not None and self.session is not None
        try:
            while True:
                data = await self.conn.recv()
                try:
                    frame_type, plaintext = self.session.open_bytes(data)
                except ProtocolError:
                    self.rejected_frames += 1
                    continue
                self.last_seen = self.clock()
                if frame_type == CLOSE:
                    break
                if frame_type == DATA:
                    self._route(Envelope.from_dict(json.loads(plaintext)))
        except ConnectionClosed:
            pass
        finally:
            self._session_lost = True
            self._fail_waiters(ProtocolError.of(ErrorCode.E_CONN, "session lost"))

    def _route(self, reply: Envelope) -> None:
        key = reply.context.parent_id
        queue = self._streams.get(key)
        if queue is not None:
            queue.put_nowait(reply)
            return
        fut = self._pending.get(key)
        if fut is not None and not fut.done():
            fut.set_result(reply)

    # -- send path

    async def _send_frame(self, seal, kind: str) -> None:
        if self.session is None or self.conn is None or self._session_lost:
            raise ProtocolError.of(ErrorCode.E_CONN, "no live session")
        try:
            async with self._send_lock:
                await self.conn.send(seal(self.session), kind)
        except ConnectionClosed as exc:
            self._session_lost = True
            raise ProtocolError.of(ErrorCode.E_CONN, "session lost") from exc

    async def send(self, e: Envelope) -> Envelope:
        if self.fallback:
            return await self.fallback_send(e)
        return await self._metered(self._send_session(e))

    async def _send_session(self, e: Envelope) -> Envelope:
        fut = asyncio.get_running_loop().create_future()
        self._pending[e.id] = fut
        try:
            await self._send_frame(lambda s: s.seal(e), RETRY_OVERHEAD if e.meta.retry_count else PAYLOAD)
            return raise_if_error(await fut)
        finally:
            self._pending.pop(e.id, None)

    async def fallback_send(self, e: Envelope) -> Envelope:
        """Plaintext POST /anp/message; only when the adapter is configured for it."""
        if not self.fallback:
            raise ProtocolError.of(ErrorCode.E_UNSUPPORTED, "HTTP fallback disabled")
        return await self._metered(self._fallback_once(e))

    async def _fallback_once(self, e: Envelope) -> Envelope:
        try:
            body = dumps(anp_encode(e))
        except (TypeError, ValueError) as exc:
            raise ProtocolError.of(ErrorCode.E_ENCODE, str(exc)) from exc
        headers = {"content-type": "application/json"}
        if self.descriptor.credentials:
            headers["authorization"] = f"Bearer {self.descriptor.credentials}"
        req = HttpRequest("POST", "/anp/message", headers, body)
        resp = await self.network.request(self.descriptor.address, req, self.tap_context(e.meta.retry_count))
        if not resp.ok:
            raise ProtocolError.of(ErrorCode.E_HTTP, resp.body[:200].decode("utf-8", "replace"), resp.status)
        try:
            return anp_decode(json.loads(resp.body))
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError.of(ErrorCode.E_DECODE, str(exc)) from exc

    async def send_streaming(self, e: Envelope) -> AsyncIterator[Fragment]:
        if self.fallback:
            raise ProtocolError.of(ErrorCode.E_UNSUPPORTED, "HTTP fallback does not stream")
        e = e.with_context(stream=True)
        queue: asyncio.Queue = asyncio.Queue()
        self._streams[e.id] = queue
        try:
            await self._send_frame(lambda s: s.seal(e), PAYLOAD)
            index = 0
            while True:
                item = await asyncio.wait_for(queue.get(), self.timeout)
                if isinstance(item, ProtocolError):
                    raise item
                raise_if_error(item)
                if STREAM_DONE_TAG in item.context.tags:
                    yield Fragment(index, final=True)
                    return
                yield Fragment(index, item)
                index += 1
        except asyncio.TimeoutError as exc:
            self.metrics.count_failure(self.labels)
            raise ProtocolError.of(ErrorCode.E_TIMEOUT, "stream stalled") from exc
        finally:
            self._streams.pop(e.id, None)


def forge_session_header(frame: bytes, session_id: str) -> bytes:
    """Rewrite a sealed frame's session id; used by the hijack probe."""
    header, _, ciphertext = parse_frame(frame)
    return encode_frame({**header, "session_id": session_id}, ciphertext)
