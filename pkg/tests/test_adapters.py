"""Adapter contract shared by all four protocols: send, streaming, lifecycle, metering."""

import asyncio

import pytest

from helpers import make_pair
from protomesh.envelope import ErrorCode, ProtocolError, dumps, new_envelope
from protomesh.pal import AdapterPool, RetryPolicy, send_with_retry
from protomesh.transport import HttpResponse
from protomesh.wire import HANDSHAKE, PAYLOAD, RETRY_OVERHEAD, byte_class

PROTOCOLS = ("a2a", "acp", "anp", "agora")


def envelope(net, content, **options):
    return new_envelope("agent_A", "agent_B", content, ids=net.ids, clock=net.clock, **options)


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_echo_round_trip(virtual, protocol):
    async def main():
        net = await make_pair(protocol).start()
        adapter = await net.adapter("agent_A", "agent_B")
        sent = envelope(net, {"question": "what is 2+2", "n": [1, 2]})
        reply = await adapter.send(sent)
        await net.close()
        return sent, reply

    sent, reply = virtual(main)
    assert reply.content == sent.content
    assert reply.src == "agent_B" and reply.dst == "agent_A"
    assert reply.context.trace_id == sent.context.trace_id
    assert reply.context.parent_id == sent.id


@pytest.mark.parametrize("protocol", ["a2a", "acp", "agora"])
def test_server_error_surfaces_as_http_kind(virtual, protocol):
    async def boom(e):
        raise RuntimeError("handler failed")

    async def main():
        net = await make_pair(protocol, handler_for=lambda _: boom).start()
        server = net.nodes["agent_B"].server
        original = server.handle

        async def failing(request):
            if request.method == "POST":
                return HttpResponse(500, {}, b'{"error":"internal"}')
            return await original(request)

        server.handle = failing
        adapter = await net.adapter("agent_A", "agent_B")
        with pytest.raises(ProtocolError) as info:
            await adapter.send(envelope(net, {"x": 1}))
        failures = adapter.metrics.failures[adapter.labels]
        await net.close()
        return info.value, failures

    err, failures = virtual(main)
    assert err.kind is ErrorCode.E_HTTP and err.error.http_status == 500
    assert failures == 1


@pytest.mark.parametrize("protocol", ["a2a", "acp", "agora"])
def test_payload_bytes_equal_tapped_request_and_reply(virtual, protocol):
    async def main():
        net = await make_pair(protocol).start()
        adapter = await net.adapter("agent_A", "agent_B")
        await adapter.send(envelope(net, {"blob": "x" * 1000}))
        frames = [f for f in net.tap.frames if byte_class(f) == PAYLOAD]
        totals = net.metrics.totals()
        await net.close()
        return frames, totals

    frames, totals = virtual(main)
    assert {f.direction for f in frames} == {"out", "in"}
    assert totals["msg_bytes_payload"] == sum(len(f.data) for f in frames)
    assert totals["msg_bytes_retry_overhead"] == 0


def test_anp_handshake_bytes_are_not_metered(virtual):
    async def main():
        net = await make_pair("anp").start()
        handshake = [f for f in net.tap.frames if f.kind == HANDSHAKE]
        before = net.metrics.totals()
        await net.close()
        return handshake, before

    handshake, before = virtual(main)
    assert handshake
    assert before["msg_bytes_payload"] == 0 and before["msg_bytes_retry_overhead"] == 0


def test_retried_attempts_count_as_overhead(virtual):
    async def main():
        calls = {"n": 0}
        net = await make_pair("a2a").start()
        server = net.nodes["agent_B"].server
        original = server.handle

        async def flaky(request):
            if request.method == "POST":
                calls["n"] += 1
                if calls["n"] <= 2:
                    return HttpResponse(503, {}, b"busy")
            return await original(request)

        server.handle = flaky
        adapter = await net.adapter("agent_A", "agent_B")
        reply = await send_with_retry(adapter, envelope(net, {"blob": "y" * 100}), RetryPolicy(max_retries=3))
        retried = [f for f in net.tap.frames if f.direction == "out" and f.attempt > 0]
        first = [f for f in net.tap.frames if f.direction == "out" and f.attempt == 0 and f.kind == PAYLOAD]
        overhead = sum(len(f.data) for f in net.tap.frames if byte_class(f) == RETRY_OVERHEAD)
        totals = net.metrics.totals()
        await net.close()
        return reply, retried, first, overhead, totals

    reply, retried, first, overhead, totals = virtual(main)
    assert reply.content == {"blob": "y" * 100}
    assert len(retried) == 2 and len(first) == 1
    # Retried request bodies differ from the first only in the retry counter digit.
    assert all(len(f.data) == len(first[0].data) for f in retried)
    assert totals["msg_bytes_retry_overhead"] == overhead > 0


def test_send_is_single_attempt(virtual):
    async def main():
        calls = {"n": 0}
        net = await make_pair("acp").start()
        server = net.nodes["agent_B"].server

        async def always_busy(request):
            calls["n"] += 1
            return HttpResponse(503, {}, b"busy")

        adapter = await net.adapter("agent_A", "agent_B")
        server.handle = always_busy
        with pytest.raises(ProtocolError):
            await adapter.send(envelope(net, {"x": 1}))
        await net.close()
        return calls["n"]

    assert virtual(main) == 1


def test_retry_gives_up_after_max_retries(virtual):
    async def main():
        calls = {"n": 0}
        net = await make_pair("a2a").start()
        adapter = await net.adapter("agent_A", "agent_B")

        async def always_busy(request):
            calls["n"] += 1
            return HttpResponse(503, {}, b"busy")

        net.nodes["agent_B"].server.handle = always_busy
        with pytest.raises(ProtocolError):
            await send_with_retry(adapter, envelope(net, {"x": 1}), RetryPolicy(max_retries=3))
        await net.close()
        return calls["n"]

    assert virtual(main) == 4


@pytest.mark.parametrize("protocol", ["a2a", "acp", "anp"])
def test_streaming_yields_fragments_then_marker(virtual, protocol):
    async def chunks(e):
        for i in range(3):
            yield {"chunk": i}

    async def main():
        net = await make_pair(protocol, stream_handler_for=lambda _: chunks).start()
        adapter = await net.adapter("agent_A", "agent_B")
        fragments = [f async for f in adapter.send_streaming(envelope(net, {"q": 1}))]
        await net.close()
        return fragments

    fragments = virtual(main)
    assert [f.envelope.content for f in fragments[:-1]] == [{"chunk": 0}, {"chunk": 1}, {"chunk": 2}]
    assert fragments[-1].final and fragments[-1].envelope is None
    assert [f.index for f in fragments] == list(range(4))


@pytest.mark.parametrize("protocol", ["a2a", "acp", "anp"])
def test_zero_chunk_stream_is_marker_only(virtual, protocol):
    async def nothing(e):
        return
        yield

    async def main():
        net = await make_pair(protocol, stream_handler_for=lambda _: nothing).start()
        adapter = await net.adapter("agent_A", "agent_B")
        fragments = [f async for f in adapter.send_streaming(envelope(net, {"q": 1}))]
        await net.close()
        return fragments

    fragments = virtual(main)
    assert len(fragments) == 1 and fragments[0].final


def test_agora_does_not_stream(virtual):
    async def main():
        net = await make_pair("agora").start()
        adapter = await net.adapter("agent_A", "agent_B")
        with pytest.raises(ProtocolError) as info:
            async for _ in adapter.send_streaming(envelope(net, {"q": 1})):
                pass
        await net.close()
        return info.value

    assert virtual(main).kind is ErrorCode.E_UNSUPPORTED


@pytest.mark.parametrize(
    "protocol,path",
    [("a2a", "/.well-known/agent.json"), ("acp", "/.well-known/agent.json"), ("agora", "/.well-known")],
)
def test_initialize_fetches_discovery_document(virtual, protocol, path):
    async def main():
        net = await make_pair(protocol).start()
        adapter = await net.adapter("agent_A", "agent_B")
        gets = [f for f in net.tap.frames if f.direction == "out" and f.kind == HANDSHAKE]
        await net.close()
        return adapter.discovery, gets

    discovery, gets = virtual(main)
    assert discovery["protocol"] == protocol
    assert gets


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_health_and_cleanup(virtual, protocol):
    async def main():
        net = await make_pair(protocol).start()
        adapter = await net.adapter("agent_A", "agent_B")
        alive = await adapter.health_check()
        await net.kill("agent_B")
        await asyncio.sleep(0)
        if protocol == "anp":
            # The session dies with the server; a fresh probe on a new adapter fails to connect.
            probe = net.make_adapter("agent_A", "agent_B")
            with pytest.raises(ProtocolError) as info:
                await probe.initialize()
            assert info.value.kind is ErrorCode.E_CONN
        dead = await adapter.health_check()
        await adapter.cleanup()
        await adapter.cleanup()
        await net.close()
        return alive, dead, adapter.closed

    alive, dead, closed = virtual(main)
    assert alive is True and dead is False and closed is True


def test_adapter_pool_one_instance_per_edge():
    made = []

    class Fake:
        closed = False

    def factory(descriptor):
        made.append(descriptor)
        return Fake()

    from protomesh.pal import AdapterDescriptor

    pool = AdapterPool(factory)
    d = AdapterDescriptor("a2a", "B", "http://b.mesh:80", "tok")
    assert pool.get(d) is pool.get(d)
    pool.get(AdapterDescriptor("a2a", "B", "http://b.mesh:80", "other"))
    assert len(pool) == 2 and len(made) == 2


def test_receive_message_is_a_stub(virtual):
    async def main():
        net = await make_pair("a2a").start()
        adapter = await net.adapter("agent_A", "agent_B")
        result = await adapter.receive_message()
        await net.close()
        return result

    assert virtual(main) is None


def test_unserializable_content_is_encode_error(virtual):
    async def main():
        net = await make_pair("a2a").start()
        adapter = await net.adapter("agent_A", "agent_B")
        with pytest.raises(ProtocolError) as info:
            await adapter.send(envelope(net, {"x": object()}))
        await net.close()
        return info.value

    assert virtual(main).kind is ErrorCode.E_ENCODE


def test_backoff_is_seeded_full_jitter():
    import random

    policy = RetryPolicy()
    a = [policy.backoff(k, random.Random(1)) for k in (1, 2, 3)]
    b = [policy.backoff(k, random.Random(1)) for k in (1, 2, 3)]
    assert a == b
    assert all(0 <= d <= 0.1 * 2 ** (k - 1) for d, k in zip(a, (1, 2, 3)))


def test_metric_labels_are_three_dimensional(virtual):
    async def main():
        net = await make_pair("acp").start()
        adapter = await net.adapter("agent_A", "agent_B")
        await adapter.send(envelope(net, {"x": 1}))
        export = net.metrics.export()
        await net.close()
        return export

    export = virtual(main)
    labels = {tuple(sorted(s["labels"])) for s in export["series"]}
    assert labels == {("dst_id", "protocol", "src_agent")}
