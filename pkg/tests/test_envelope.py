import json
import uuid
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import agent_ids, canonical_envelope, content_docs
from protomesh.envelope import (
    DEFAULT_TTL_MS,
    Envelope,
    ErrorCode,
    ErrorKind,
    IdFactory,
    new_envelope,
    normalize_error,
    validate,
)

GOLDEN = Path(__file__).parent / "golden"


def test_defaults_on_new_envelope():
    e = new_envelope("A", "B", {"question": "q"})
    assert e.context.ttl_ms == DEFAULT_TTL_MS == 30000
    assert e.context.stream is False
    assert e.context.priority == 0
    assert e.context.trace_id and e.context.idempotency_key
    assert uuid.UUID(e.id).version == 4


def test_loopback_is_valid():
    e = new_envelope("A", "A", {})
    assert validate(e) == []


def test_fresh_ids_per_call():
    a, b = new_envelope("A", "B", {"x": 1}), new_envelope("A", "B", {"x": 1})
    assert a.id != b.id
    assert (a.src, a.dst) == (b.src, b.dst)


def test_seeded_ids_replay():
    a = new_envelope("A", "B", {}, ids=IdFactory(7), clock=lambda: 1.0)
    b = new_envelope("A", "B", {}, ids=IdFactory(7), clock=lambda: 1.0)
    assert a == b


def test_options_are_applied_and_unknown_rejected():
    e = new_envelope("A", "B", {}, session_id="s-1", priority=3, stream=True, tags=["t"], protocol_hint="acp")
    assert e.context.session_id == "s-1" and e.context.priority == 3 and e.context.stream
    assert e.context.tags == ("t",) and e.meta.protocol_hint == "acp"
    with pytest.raises(TypeError):
        new_envelope("A", "B", {}, colour="red")


@pytest.mark.parametrize("src,dst", [("", "B"), ("A", "")])
def test_empty_endpoints_rejected(src, dst):
    with pytest.raises(ValueError):
        new_envelope(src, dst, {})


def test_validate_reports_violations():
    e = canonical_envelope()
    assert validate(e) == []
    assert "dst missing" in validate(replace(e, dst=""))
    assert "ttl_ms negative" in validate(e.with_context(ttl_ms=-1))
    assert "protocol_hint invalid" in validate(e.with_meta(protocol_hint="smtp"))
    assert "retry_count exceeds max_retries" in validate(e.with_meta(retry_count=4), max_retries=3)


def test_canonical_document_matches_reference_layout():
    doc = canonical_envelope().to_dict()
    assert doc == json.loads((GOLDEN / "envelope.json").read_text())
    assert list(doc) == ["id", "ts", "src", "dst", "intent", "content", "context", "meta"]
    assert list(doc["context"]) == [
        "trace_id", "parent_id", "idempotency_key", "session_id",
        "priority", "ttl_ms", "stream", "artifact_refs", "tags",
    ]
    assert list(doc["meta"]) == ["protocol_hint", "retry_count"]
    assert Envelope.from_dict(doc) == canonical_envelope()


@given(agent_ids, agent_ids, content_docs)
def test_new_envelope_always_validates(src, dst, content):
    assert validate(new_envelope(src, dst, content)) == []


@pytest.mark.parametrize(
    "raw,kind,status",
    [
        ({"status": 503}, ErrorCode.E_HTTP, 503),
        ({"category": "decode", "detail": "bad json"}, ErrorCode.E_DECODE, None),
        ({"category": "handshake"}, ErrorCode.E_CONN, None),
        ({"category": "identity"}, ErrorCode.E_CONN, None),
        ({"category": "timeout"}, ErrorCode.E_TIMEOUT, None),
        ({"category": "encode"}, ErrorCode.E_ENCODE, None),
        ({"category": "unsupported"}, ErrorCode.E_UNSUPPORTED, None),
        ({"category": "protocol"}, ErrorCode.E_PROTOCOL, None),
        (json.JSONDecodeError("x", "doc", 0), ErrorCode.E_DECODE, None),
        (TimeoutError(), ErrorCode.E_TIMEOUT, None),
        (ConnectionRefusedError(), ErrorCode.E_CONN, None),
    ],
)
def test_normalize_error_mapping(raw, kind, status):
    err = normalize_error(raw)
    assert err.kind is kind
    assert err.http_status == status


def test_unmapped_category_keeps_detail():
    err = normalize_error({"category": "cosmic-ray", "detail": "bit flip"})
    assert err.kind is ErrorCode.E_PROTOCOL and err.detail == "bit flip"


@given(st.sampled_from(["timeout", "http_status", "connection", "handshake", "identity", "protocol",
                        "encode", "decode", "unsupported", "other"]), st.none() | st.integers(100, 599))
def test_normalize_error_total_and_deterministic(category, status):
    raw = {"category": category, "status": status}
    first = normalize_error(raw)
    assert first == normalize_error(raw)
    assert (first.kind is ErrorCode.E_HTTP) == (first.http_status is not None)


def test_http_status_only_with_http_kind():
    with pytest.raises(ValueError):
        ErrorKind(ErrorCode.E_CONN, "x", 500)
    with pytest.raises(ValueError):
        ErrorKind(ErrorCode.E_HTTP, "x")
