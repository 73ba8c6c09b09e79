"""Decisions -> network plan: nodes, links and stateless bridges."""

from __future__ import annotations

from typing import Any, Mapping, Sequence

from ..transport import ConfigError
from .engine import DecisionRecord, extract_evidence_spans, map_spans_to_cfm, module_id_of

# Native primitives a link switches on when the chosen protocol offers them.
_NATIVE = {
    "streaming": {"A2A": "sse", "ACP": "sse", "ANP": "ws_stream"},
    "job_status": {"ACP": "status_endpoint"},
    "did_identity": {"ANP": "did_auth"},
    "e2e_encryption": {"ANP": "e2e"},
    "routine_governance": {"Agora": "protocol_hash"},
    "rest_resource": {"ACP": "resource_api"},
    "idempotent_ops": {"ACP": "idempotency_key"},
}


def decide_native_features(protocol: str, module: Mapping[str, Any]) -> list[str]:
    """Native features enabled for a module, from its own requirement cues."""
    req = map_spans_to_cfm(extract_evidence_spans(module.get("text", "") or ""))
    features = {_NATIVE[f][protocol] for f in req.cues if f in _NATIVE and protocol in _NATIVE[f]}
    return sorted(features)


def _protocol(decision: DecisionRecord | Mapping[str, Any]) -> str:
    return decision.selected_protocol if isinstance(decision, DecisionRecord) else decision["selected_protocol"]


def apply_router_decisions(
    decisions: Mapping[str, DecisionRecord | Mapping[str, Any]], modules: Sequence[Mapping[str, Any]]
) -> dict[str, list]:
    proto_of = {mid: _protocol(d) for mid, d in decisions.items()}
    nodes, links, bridges = [], [], []
    for m in modules:
        mid = module_id_of(m)
        if mid not in proto_of:
            raise ConfigError(f"no routing decision for module {mid}")
        nodes.append({"id": mid, "protocol": proto_of[mid], "features": decide_native_features(proto_of[mid], m)})
    for m in modules:
        mid = module_id_of(m)
        for nbr in m.get("neighbors", []):
            if nbr not in proto_of:
                raise ConfigError(f"no routing decision for neighbor {nbr}")
            src_p, dst_p = proto_of[mid], proto_of[nbr]
            links.append({"src": mid, "dst": nbr, "protocol": [src_p, dst_p]})
            if src_p != dst_p:
                bridges.append(
                    {
                        "src": mid,
                        "dst": nbr,
                        "encode": f"encode_to_{dst_p.lower()}",
                        "decode": f"decode_from_{src_p.lower()}",
                        "stateless": True,
                    }
                )
    return {"nodes": nodes, "links": links, "bridges": bridges}
