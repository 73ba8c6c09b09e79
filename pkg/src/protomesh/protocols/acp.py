"""ACP: resource-style messaging with capability, status and long-running jobs."""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass, field
from typing import Any

from ..envelope import Envelope, EnvelopeContext, EnvelopeMeta, ErrorCode, ProtocolError
from ..pal import CodecEntry, HttpAdapter
from ..transport import HttpRequest, HttpResponse
from .base import AgentServer, json_response, require_dict

PROTOCOL_VERSION = "1.0"
ASYNC_PREFERENCE = "respond-async"

PENDING, RUNNING, COMMITTED, ABORTED = "pending", "running", "committed", "aborted"
JOB_STATES = (PENDING, RUNNING, COMMITTED, ABORTED)
_TRANSITIONS = {PENDING: {RUNNING, ABORTED}, RUNNING: {COMMITTED, ABORTED}, COMMITTED: set(), ABORTED: set()}

_METADATA_CONTEXT = ("trace_id", "parent_id", "session_id", "priority", "ttl_ms", "stream", "artifact_refs", "tags")


def _encode(e: Envelope, message_type: str) -> dict[str, Any]:
    ctx = e.context.to_dict()
    return {
        "id": e.id,
        "type": message_type,
        "sender": e.src,
        "receiver": e.dst,
        "payload": e.content,
        "timestamp": e.ts,
        "correlation_id": e.context.idempotency_key,
        "metadata": {
            **{k: ctx[k] for k in _METADATA_CONTEXT},
            "intent": e.intent,
            **e.meta.to_dict(),
        },
    }


def acp_encode(e: Envelope) -> dict[str, Any]:
    return _encode(e, "request")


def acp_encode_response(e: Envelope) -> dict[str, Any]:
    return _encode(e, "response")


def acp_decode(doc: dict[str, Any], headers: dict[str, str] | None = None) -> Envelope:
    if doc.get("type") not in ("request", "response"):
        raise ValueError(f"unknown ACP message type {doc.get('type')!r}")
    metadata = doc.get("metadata", {})
    ctx = EnvelopeContext.from_dict({**metadata, "idempotency_key": doc.get("correlation_id", "")})
    return Envelope(
        id=doc["id"],
        ts=doc["timestamp"],
        src=doc["sender"],
        dst=doc["receiver"],
        intent=metadata.get("intent", ""),
        content=require_dict(doc["payload"], "payload"),
        context=ctx,
        meta=EnvelopeMeta.from_dict(metadata),
    )


ACP_CODEC = CodecEntry("acp", acp_encode, acp_decode, encode_response=acp_encode_response)


@dataclass
class Job:
    session_id: str
    state: str = PENDING
    history: list[str] = field(default_factory=lambda: [PENDING])
    result: dict | None = None
    error: str | None = None
    task: asyncio.Task | None = None

    def advance(self, state: str) -> None:
        if state not in _TRANSITIONS[self.state]:
            raise ValueError(f"illegal job transition {self.state} -> {state}")
        self.state = state
        self.history.append(state)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"session_id": self.session_id, "state": self.state, "history": list(self.history)}
        if self.result is not None:
            doc["result"] = self.result
        if self.error is not None:
            doc["error"] = self.error
        return doc


class ACPServer(AgentServer):
    protocol_name = "acp"

    def __init__(self, agent_id: str, handler=None, *, job_start_delay: float = 0.0, **kwargs: Any):
        super().__init__(agent_id, handler, **kwargs)
        self.job_start_delay = job_start_delay
        self.jobs: dict[str, Job] = {}
        self.routes.update(
            {
                ("GET", "/.well-known/agent.json"): self.manifest,
                ("GET", "/acp/capabilities"): self.capabilities,
                ("GET", "/acp/status"): self.status,
                ("POST", "/acp/message"): self.message,
            }
        )

    def _capabilities(self) -> dict[str, Any]:
        return {"streaming": True, "async_jobs": True, "job_states": list(JOB_STATES), "idempotency": "correlation_id"}

    async def manifest(self, request: HttpRequest) -> HttpResponse:
        return json_response(
            200,
            {
                "name": self.agent_id,
                "protocol": "acp",
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": self._capabilities(),
                "endpoints": {
                    "message": "/acp/message",
                    "status": "/acp/status",
                    "capabilities": "/acp/capabilities",
                    "health": "/health",
                },
            },
        )

    async def capabilities(self, request: HttpRequest) -> HttpResponse:
        return json_response(200, self._capabilities())

    async def status(self, request: HttpRequest) -> HttpResponse:
        session_id = request.query.get("session_id")
        if not session_id:
            return json_response(400, {"error": "session_id required"})
        job = self.jobs.get(session_id)
        if job is None:
            return json_response(404, {"error": "unknown session"})
        return json_response(200, job.to_dict())

    async def message(self, request: HttpRequest) -> HttpResponse:
        if ASYNC_PREFERENCE in (request.header("prefer") or ""):
            return await self.submit(request)
        return await self.serve_envelope(request, acp_decode, acp_encode_response, streaming=True)

    async def submit(self, request: HttpRequest) -> HttpResponse:
        denied = self.guard(request)
        if denied is not None:
            return denied
        try:
            e = acp_decode(json.loads(request.body))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            return json_response(400, {"error": f"malformed request: {exc}"})
        session_id = e.context.session_id or e.id
        job = self.jobs.get(session_id)
        if job is None:
            job = self.jobs[session_id] = Job(session_id)
            job.task = asyncio.ensure_future(self._run_job(job, e))
        return json_response(202, job.to_dict())

    async def _run_job(self, job: Job, e: Envelope) -> None:
        try:
            if self.job_start_delay:
                await asyncio.sleep(self.job_start_delay)
            job.advance(RUNNING)
            reply = await self.invoke(e)
        except asyncio.CancelledError:
            self._abort(job, "cancelled")
            raise
        except Exception as exc:
            self._abort(job, f"{type(exc).__name__}: {exc}")
            return
        job.result = acp_encode_response(reply)
        job.advance(COMMITTED)

    def _abort(self, job: Job, reason: str) -> None:
        if job.state in (PENDING, RUNNING):
            job.error = reason
            job.advance(ABORTED)

    def on_stop(self) -> None:
        for job in self.jobs.values():
            if job.task is not None and not job.task.done():
                job.task.cancel()


class ACPAdapter(HttpAdapter):
    protocol_name = "acp"
    supports_streaming = True
    message_path = "/acp/message"

    async def submit(self, e: Envelope) -> str:
        """Start a long-running job keyed by ``session_id``; returns that key."""
        headers = self._headers(e)
        headers["prefer"] = ASYNC_PREFERENCE
        req = HttpRequest("POST", self.message_path, headers, self._encode(e))

        async def once() -> str:
            resp = await self.network.request(self.descriptor.address, req, self.tap_context(e.meta.retry_count))
            self._check_status(resp)
            return json.loads(resp.body)["session_id"]

        return await self._metered(once())

    async def job_status(self, session_id: str) -> dict[str, Any]:
        req = HttpRequest("GET", "/acp/status", self._headers(), query={"session_id": session_id})

        async def once() -> dict[str, Any]:
            resp = await self.network.request(self.descriptor.address, req, self.tap_context(kind="control"))
            self._check_status(resp)
            return json.loads(resp.body)

        return await self._metered(once())

    async def wait_for_job(self, session_id: str, poll_interval: float, max_polls: int = 10_000) -> dict[str, Any]:
        """Poll until the job leaves the live states; returns the last status."""
        for _ in range(max_polls):
            status = await self.job_status(session_id)
            if status["state"] in (COMMITTED, ABORTED):
                return status
            await asyncio.sleep(poll_interval)
        raise ProtocolError.of(ErrorCode.E_TIMEOUT, f"job {session_id} still {status['state']}")

    async def capabilities(self) -> dict[str, Any]:
        resp = await self._get("/acp/capabilities")
        self._check_status(resp)
        return json.loads(resp.body)
