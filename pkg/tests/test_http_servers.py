import asyncio
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import canonical_envelope, make_pair
from protomesh.clock import loop_clock
from protomesh.envelope import ErrorCode, ProtocolError, dumps, new_envelope
from protomesh.protocols import A2AServer, ACPServer, AgoraServer
from protomesh.protocols.a2a import a2a_encode
from protomesh.protocols.acp import acp_encode
from protomesh.protocols.agora import agora_encode, routine_hash
from protomesh.transport import ConfigError, HttpRequest

ROUTINE = "routine: quote-price v1\ninput: sku\noutput: price\n"


def post(path, doc, **headers):
    body = doc if isinstance(doc, bytes) else dumps(doc)
    return HttpRequest("POST", path, {"content-type": "application/json", **headers}, body)


def counting_handler():
    calls = []

    async def handler(e):
        calls.append(e)
        return {"handled": len(calls)}

    return handler, calls


def fresh_envelope(**changes):
    clock = loop_clock()
    return canonical_envelope(ts=clock(), **changes)


# --------------------------------------------------------------------------- A2A


def test_a2a_endpoints(virtual):
    async def main():
        handler, calls = counting_handler()
        server = A2AServer("agent_B", handler, clock=loop_clock())
        health = await server.handle(HttpRequest("GET", "/health"))
        card = await server.handle(HttpRequest("GET", "/.well-known/agent.json"))
        ok = await server.handle(post("/message", a2a_encode(fresh_envelope())))
        bad = await server.handle(post("/message", dumps(a2a_encode(fresh_envelope()))[:-7]))
        missing = await server.handle(HttpRequest("GET", "/nope"))
        return health, card, ok, bad, missing, calls

    health, card, ok, bad, missing, calls = virtual(main)
    assert health.status == 200
    assert json.loads(card.body)["capabilities"]["streaming"] is True
    assert ok.status == 200 and len(calls) == 1
    assert bad.status == 400
    assert missing.status == 404


def test_truncated_body_seen_by_client_as_http_error(virtual):
    async def main():
        net = await make_pair("a2a").start()
        server = net.nodes["agent_B"].server
        resp = await server.handle(post("/message", b'{"id": "x", "params": {'))
        await net.close()
        return resp

    assert virtual(main).status == 400


@pytest.mark.parametrize("server_cls,path,encode", [
    (A2AServer, "/message", a2a_encode),
    (ACPServer, "/acp/message", acp_encode),
    (AgoraServer, "/agora", agora_encode),
])
def test_duplicate_post_has_one_effect_and_identical_body(virtual, server_cls, path, encode):
    async def main():
        handler, calls = counting_handler()
        server = server_cls("agent_B", handler, clock=loop_clock())
        doc = encode(fresh_envelope())
        first = await server.handle(post(path, doc))
        second = await server.handle(post(path, doc))
        return first, second, calls, server.effects

    first, second, calls, effects = virtual(main)
    assert first.status == second.status == 200
    assert first.body == second.body
    assert len(calls) == 1 and effects == 1


def test_concurrent_duplicates_coalesce(virtual):
    async def main():
        calls = []

        async def slow(e):
            calls.append(e)
            await asyncio.sleep(1.0)
            return {"done": True}

        server = A2AServer("agent_B", slow, clock=loop_clock())
        doc = a2a_encode(fresh_envelope())
        responses = await asyncio.gather(*(server.handle(post("/message", doc)) for _ in range(5)))
        return responses, calls

    responses, calls = virtual(main)
    assert len(calls) == 1
    assert len({r.body for r in responses}) == 1


def test_replay_window_expires(virtual):
    async def main():
        handler, calls = counting_handler()
        server = A2AServer("agent_B", handler, clock=loop_clock(), replay_window=5.0, max_skew=None)
        doc = a2a_encode(fresh_envelope())
        await server.handle(post("/message", doc))
        await asyncio.sleep(6.0)
        await server.handle(post("/message", doc))
        return calls

    assert len(virtual(main)) == 2


def test_bearer_tokens_enforced(virtual):
    async def main():
        server = A2AServer("agent_B", clock=loop_clock(), auth_tokens={"good"})
        doc = a2a_encode(fresh_envelope())
        denied = await server.handle(post("/message", doc, authorization="Bearer bad"))
        allowed = await server.handle(post("/message", doc, authorization="Bearer good"))
        return denied.status, allowed.status, server.effects

    assert virtual(main) == (401, 200, 1)


# --------------------------------------------------------------------------- ACP


def test_acp_job_lifecycle(virtual):
    async def main():
        async def slow(e):
            await asyncio.sleep(2.0)
            return {"committed": True}

        net = await make_pair("acp", handler_for=lambda _: slow, server_options={"job_start_delay": 1.0}).start()
        adapter = await net.adapter("agent_A", "agent_B")
        e = new_envelope("agent_A", "agent_B", {"order": 7}, ids=net.ids, clock=net.clock, session_id="job-1")
        session = await adapter.submit(e)
        seen = [(await adapter.job_status(session))["state"]]
        await asyncio.sleep(1.5)
        seen.append((await adapter.job_status(session))["state"])
        final = await adapter.wait_for_job(session, poll_interval=0.5)
        missing = await net.nodes["agent_B"].server.handle(
            HttpRequest("GET", "/acp/status", query={"session_id": "nope"})
        )
        caps = await adapter.capabilities()
        await net.close()
        return session, seen, final, missing.status, caps

    session, seen, final, missing, caps = virtual(main)
    assert session == "job-1"
    assert seen == ["pending", "running"]
    assert final["state"] == "committed"
    assert final["history"] == ["pending", "running", "committed"]
    assert final["result"]["payload"] == {"committed": True}
    assert missing == 404
    assert "committed" in caps["job_states"]


def test_acp_failed_job_aborts(virtual):
    async def main():
        async def broken(e):
            raise RuntimeError("disk full")

        net = await make_pair("acp", handler_for=lambda _: broken).start()
        adapter = await net.adapter("agent_A", "agent_B")
        e = new_envelope("agent_A", "agent_B", {}, ids=net.ids, clock=net.clock, session_id="job-2")
        final = await adapter.wait_for_job(await adapter.submit(e), poll_interval=0.1)
        await net.close()
        return final

    final = virtual(main)
    assert final["state"] == "aborted" and "disk full" in final["error"]


# --------------------------------------------------------------------------- Agora


def test_agora_registered_hash_runs_routine(virtual):
    async def main():
        async def quote(e):
            return {"price": 12}

        net = make_pair("agora")
        await net.start(connect=False)
        server = net.nodes["agent_B"].server
        digest = server.register_routine(ROUTINE, quote)
        adapter = net.make_adapter("agent_A", "agent_B", routine=ROUTINE)
        await adapter.initialize()
        reply = await adapter.send(new_envelope("agent_A", "agent_B", {"sku": "a"}, ids=net.ids, clock=net.clock))
        last_request = [f for f in net.tap.frames if f.direction == "out" and f.kind == "payload"][-1]
        await net.close()
        return digest, reply, json.loads(last_request.data)

    digest, reply, doc = virtual(main)
    assert digest == routine_hash(ROUTINE)
    assert reply.content == {"price": 12}
    assert doc["protocol_hash"] == digest and "fallback_text" not in doc


def test_agora_unknown_hash_uses_fallback_text(virtual):
    async def main():
        handler, calls = counting_handler()
        net = make_pair("agora", handler_for=lambda _: handler)
        await net.start(connect=False)
        adapter = net.make_adapter("agent_A", "agent_B", routine="some routine the server never saw")
        await adapter.initialize()
        await adapter.send(new_envelope("agent_A", "agent_B", {"text": "quote sku a"}, ids=net.ids, clock=net.clock))
        sent = [f for f in net.tap.frames if f.direction == "out" and f.kind == "payload"][-1]
        await net.close()
        return calls, json.loads(sent.data)

    calls, doc = virtual(main)
    assert len(calls) == 1
    assert doc["fallback_text"] == "quote sku a"


def test_agora_unknown_hash_without_fallback_is_protocol_error(virtual):
    async def main():
        net = make_pair("agora")
        await net.start(connect=False)
        server = net.nodes["agent_B"].server
        doc = agora_encode(fresh_envelope(), protocol_hash="0" * 64)
        resp = await server.handle(post("/agora", doc))
        adapter = net.make_adapter("agent_A", "agent_B", routine="unknown")
        await adapter.initialize()
        adapter.discovery["protocol_hashes"] = [adapter.protocol_hash]  # client believes the hash is known
        with pytest.raises(ProtocolError) as info:
            await adapter.send(new_envelope("agent_A", "agent_B", {"x": 1}, ids=net.ids, clock=net.clock))
        await net.close()
        return resp, info.value

    resp, err = virtual(main)
    assert resp.status == 422 and json.loads(resp.body)["status"] == "error"
    assert err.kind is ErrorCode.E_PROTOCOL


def test_agora_hash_document_mismatch_rejected(virtual):
    async def main():
        server = AgoraServer("agent_B", clock=loop_clock())
        doc = agora_encode(fresh_envelope(), protocol_hash=routine_hash(ROUTINE))
        doc["protocol_document"] = ROUTINE + " tampered"
        return await server.handle(post("/agora", doc))

    assert virtual(main).status == 400
    with pytest.raises(ConfigError):
        AgoraServer("agent_B").register_routine(ROUTINE, None, protocol_hash="f" * 64)


def test_agora_well_known_lists_hashes(virtual):
    async def main():
        server = AgoraServer("agent_B", clock=loop_clock())
        digest = server.register_routine(ROUTINE, None)
        resp = await server.handle(HttpRequest("GET", "/.well-known"))
        return digest, json.loads(resp.body)

    digest, doc = virtual(main)
    assert doc["protocol_hashes"] == [digest]


def test_agora_conversation_threads_rounds(virtual):
    async def main():
        net = make_pair("agora")
        await net.start()
        adapter = await net.adapter("agent_A", "agent_B")
        msgs = [new_envelope("agent_A", "agent_B", {"turn": i}, ids=net.ids, clock=net.clock) for i in range(3)]
        cid, first = await adapter.converse(msgs[0])
        again = [await adapter.converse(m, cid) for m in msgs[1:]]
        server = net.nodes["agent_B"].server
        history = list(server.conversations[cid])
        unknown = await server.handle(post("/conversations/nope", agora_encode(msgs[0])))
        await net.close()
        return cid, first, again, history, unknown.status

    cid, first, again, history, unknown = virtual(main)
    assert [c for c, _ in again] == [cid, cid]
    assert history == [{"turn": 0}, {"turn": 1}, {"turn": 2}]
    assert unknown == 404


@given(st.binary(min_size=1, max_size=200), st.integers(0, 199), st.integers(1, 255))
def test_routine_hash_binds_every_byte(doc, pos, flip):
    pos %= len(doc)
    changed = doc[:pos] + bytes([doc[pos] ^ flip]) + doc[pos + 1:]
    assert routine_hash(doc) == routine_hash(bytes(doc))
    assert routine_hash(changed) != routine_hash(doc)
