"""Shared builders for tests."""

from __future__ import annotations

from dataclasses import replace

from hypothesis import strategies as st

from protomesh.clock import loop_clock
from protomesh.envelope import Envelope, EnvelopeContext, EnvelopeMeta, IdFactory, new_envelope
from protomesh.harness.network import AgentNetwork
from protomesh.transport import InProcessNetwork
from protomesh.wire import WireTap


def canonical_envelope(**changes) -> Envelope:
    base = Envelope(
        id="00000000-0000-4000-8000-000000000001",
        ts=1730000000.0,
        src="agent_A",
        dst="agent_B",
        intent="qa/search",
        content={"text": "..."},
        context=EnvelopeContext(
            trace_id="00000000-0000-4000-8000-0000000000aa",
            parent_id="00000000-0000-4000-8000-0000000000bb",
            idempotency_key="00000000-0000-4000-8000-0000000000cc",
            session_id="s-123",
            artifact_refs=("uri://doc/1",),
            tags=("GAIA", "docqa"),
        ),
        meta=EnvelopeMeta(protocol_hint="a2a", retry_count=0),
    )
    return replace(base, **changes)


def pair_plan(src_protocol: str, dst_protocol: str | None = None) -> dict:
    dst_protocol = dst_protocol or src_protocol
    return {
        "nodes": [{"id": "agent_A", "protocol": src_protocol}, {"id": "agent_B", "protocol": dst_protocol}],
        "links": [{"src": "agent_A", "dst": "agent_B", "protocol": [src_protocol, dst_protocol]}],
    }


def make_pair(src_protocol: str, dst_protocol: str | None = None, **options) -> AgentNetwork:
    """Unstarted two-node network on the running virtual loop."""
    clock = loop_clock()
    options.setdefault("network", InProcessNetwork(WireTap(clock)))
    return AgentNetwork(pair_plan(src_protocol, dst_protocol), clock=clock, **options)


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12)
_scalars = st.none() | st.booleans() | st.integers(-10**6, 10**6) | st.floats(allow_nan=False, allow_infinity=False) | _text
documents = st.recursive(
    _scalars,
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(_text, inner, max_size=3),
    max_leaves=8,
)
content_docs = st.dictionaries(_text, documents, max_size=4)
agent_ids = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-", min_size=1, max_size=10)


@st.composite
def envelopes(draw):
    """Random valid envelopes with seeded ids."""
    ids = IdFactory(draw(st.integers(0, 2**32)))
    ts = draw(st.floats(0, 2e9, allow_nan=False))
    return new_envelope(
        draw(agent_ids),
        draw(agent_ids),
        draw(content_docs),
        intent=draw(_text),
        ids=ids,
        clock=lambda: ts,
        session_id=draw(_text),
        priority=draw(st.integers(0, 9)),
        stream=draw(st.booleans()),
        tags=draw(st.lists(_text, max_size=3)),
    )


def synthetic_log(seed: int):
    """Random but well-formed event log: requests, failures, kill/reconnect cycles."""
    import random

    from protomesh.harness import eventlog as ev
    from protomesh.harness.eventlog import EventLog

    rng = random.Random(f"synthetic-log:{seed}")
    log = EventLog()
    nodes = [f"node-{i}" for i in range(8)]
    for i in range(rng.randint(20, 200)):
        rid = f"r-{i:04d}"
        t = rng.uniform(0.0, 600.0)
        log.record(ev.SEND, rid, "client", t=t)
        if rng.random() < 0.1:
            log.record(ev.FAIL, rid, rng.choice(nodes), t=t + rng.uniform(0.0, 5.0), error="E_TIMEOUT")
        else:
            log.record(ev.DONE, rid, rng.choice(nodes), t=t + rng.expovariate(2.0))
    for c in range(rng.randint(0, 3)):
        k = 120.0 * (c + 1) + rng.uniform(0.0, 1.0)
        for victim in rng.sample(nodes, 3):
            log.record(ev.KILL, "", victim, t=k)
            log.record(ev.RECONNECT, "", victim, t=k + 2.0 + rng.uniform(0.0, 1.0))
    return log
