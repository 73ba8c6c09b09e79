import json
from pathlib import Path

import pytest
from hypothesis import given, settings

from helpers import canonical_envelope, envelopes
from protomesh import sse
from protomesh.pal import CodecEntry, CodecRegistry
from protomesh.envelope import ErrorCode, ProtocolError
from protomesh.protocols import default_codecs
from protomesh.protocols.a2a import A2A_CODEC
from protomesh.transport import ConfigError

GOLDEN = Path(__file__).parent / "golden"
PROTOCOLS = ("a2a", "acp", "anp", "agora")
CODECS = default_codecs()

# Send-path field alignment: envelope field -> path in each protocol document.
ALIGNMENT = {
    "a2a": {
        "id": "id", "src": "params.routing.source", "dst": "params.routing.destination",
        "content": "params.message", "trace_id": "params.context.trace_id",
        "idempotency_key": "params.context.idempotency_key", "session_id": "params.context.session_id",
    },
    "acp": {
        "id": "id", "src": "sender", "dst": "receiver", "content": "payload",
        "trace_id": "metadata.trace_id", "idempotency_key": "correlation_id", "session_id": "metadata.session_id",
    },
    "anp": {
        "id": "request_id", "src": "source_id", "dst": "target_did",
        "trace_id": "payload.context.trace_id", "idempotency_key": "payload.context.idempotency_key",
        "session_id": "payload.context.session_id",
    },
    "agora": {
        "id": "request_id", "src": "source", "content": "message",
        "trace_id": "metadata.trace_id", "idempotency_key": "metadata.idempotency_key",
        "session_id": "metadata.session_id",
    },
}

# Keys of the reference request samples for each protocol.
SAMPLE_KEYS = {
    "a2a": {"id", "params"},
    "acp": {"id", "type", "sender", "receiver", "payload", "timestamp", "correlation_id", "metadata"},
    "anp": {"type", "request_id", "payload", "timestamp", "source_id"},
}


def at(doc, path):
    for part in path.split("."):
        doc = doc[part]
    return doc


def fields(e):
    return {
        "id": e.id, "src": e.src, "dst": e.dst, "content": e.content, "trace_id": e.context.trace_id,
        "idempotency_key": e.context.idempotency_key, "session_id": e.context.session_id,
    }


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_golden_request(protocol):
    doc = CODECS.get(protocol).encode(canonical_envelope())
    assert doc == json.loads((GOLDEN / f"{protocol}_request.json").read_text())


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_alignment_paths(protocol):
    e = canonical_envelope()
    doc = CODECS.get(protocol).encode(e)
    expected = fields(e)
    for field, path in ALIGNMENT[protocol].items():
        assert at(doc, path) == expected[field], (protocol, field)


def test_anp_payload_carries_content_inline():
    doc = CODECS.get("anp").encode(canonical_envelope())
    assert doc["type"] == "anp_message"
    assert doc["payload"]["text"] == "..."


def test_agora_target_is_an_agent_url():
    doc = CODECS.get("agora").encode(canonical_envelope())
    assert doc["target"] == "agent://agent_B"


@pytest.mark.parametrize("protocol", sorted(SAMPLE_KEYS))
def test_reference_sample_keys_present(protocol):
    doc = CODECS.get(protocol).encode(canonical_envelope())
    assert SAMPLE_KEYS[protocol] <= set(doc)


def test_a2a_routing_block_shape():
    doc = CODECS.get("a2a").encode(canonical_envelope())
    assert doc["params"]["routing"] == {"destination": "agent_B", "source": "agent_A"}


def test_agora_response_has_status_and_body():
    doc = CODECS.get("agora").encode_reply(canonical_envelope())
    assert doc["status"] == "ok" and doc["body"] == {"text": "..."}


def test_a2a_stream_flag_becomes_accept_header():
    e = canonical_envelope().with_context(stream=True)
    assert A2A_CODEC.transport_hints(e) == {"accept": sse.CONTENT_TYPE}
    decoded = A2A_CODEC.decode(A2A_CODEC.encode(e.with_context(stream=False)), {"accept": sse.CONTENT_TYPE})
    assert decoded.context.stream is True


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_canonical_round_trip_is_identity(protocol):
    codec = CODECS.get(protocol)
    e = canonical_envelope()
    assert codec.decode(codec.encode(e)) == e
    assert codec.decode_reply(codec.encode_reply(e)) == e


@pytest.mark.parametrize("protocol", PROTOCOLS)
@settings(max_examples=60, deadline=None)
@given(e=envelopes())
def test_round_trip_preserves_mapped_fields(protocol, e):
    codec = CODECS.get(protocol)
    back = codec.decode(json.loads(json.dumps(codec.encode(e))))
    assert fields(back) == fields(e)


def test_anp_content_with_context_key_survives():
    e = canonical_envelope(content={"context": "user-level", "text": "x"})
    codec = CODECS.get("anp")
    assert codec.decode(codec.encode(e)).content == e.content


def test_registry_is_write_once():
    registry = CodecRegistry()
    registry.register(A2A_CODEC)
    with pytest.raises(ConfigError):
        registry.register(A2A_CODEC)
    registry.freeze()
    with pytest.raises(ConfigError):
        registry.register(CodecEntry("x", A2A_CODEC.encode, A2A_CODEC.decode))


def test_unregistered_protocol_is_unsupported():
    with pytest.raises(ProtocolError) as info:
        CODECS.get("xyz")
    assert info.value.kind is ErrorCode.E_UNSUPPORTED


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_malformed_documents_fail_decode(protocol):
    with pytest.raises((KeyError, TypeError, ValueError)):
        CODECS.get(protocol).decode({"unexpected": True})
